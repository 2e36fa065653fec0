#include "oet/injection.hpp"

#include <stdexcept>

#include "oet/errors.hpp"

namespace oet {

void PromptTemplate::validate() const {
  if (instruction_tag.empty() || input_tag.empty() || response_tag.empty()) {
    throw config_error("template: tags must be nonempty");
  }
  if (instruction_tag == input_tag || instruction_tag == response_tag ||
      input_tag == response_tag) {
    throw config_error("template: instruction/input/response tags must be pairwise distinct");
  }
}

void AttackGoal::validate() const {
  if (goal_text.empty()) throw config_error("goal: goal_text must be nonempty");
  if (target_sentence.empty()) throw config_error("goal: target_sentence must be nonempty");
}

const char* to_string(InjectionPosition p) {
  switch (p) {
    case InjectionPosition::data_start: return "data_start";
    case InjectionPosition::before_response_tag: return "before_response_tag";
    case InjectionPosition::data_end: break;
  }
  return "data_end";
}

InjectionPosition injection_position_from_string(const std::string& s) {
  if (s == "data_end") return InjectionPosition::data_end;
  if (s == "data_start") return InjectionPosition::data_start;
  if (s == "before_response_tag") return InjectionPosition::before_response_tag;
  throw config_error("unknown injection position: " + s);
}

AssembledPrompt assemble(const PromptTemplate& tmpl, const AttackCase& attack_case,
                         const AttackGoal& goal, const std::string& adv,
                         InjectionPosition position) {
  AssembledPrompt out;

  // The injected segment, with offsets of the goal and adv inside it.
  std::string injected;
  std::size_t goal_off = std::string::npos;
  std::size_t adv_off = std::string::npos;
  const std::string& first = tmpl.goal_first ? goal.goal_text : adv;
  const std::string& second = tmpl.goal_first ? adv : goal.goal_text;
  if (!first.empty() && !second.empty()) {
    injected = first + " " + second;
  } else {
    injected = first + second;
  }
  if (!goal.goal_text.empty()) {
    goal_off = tmpl.goal_first ? 0 : (adv.empty() ? 0 : adv.size() + 1);
  }
  if (!adv.empty()) {
    adv_off = tmpl.goal_first ? (goal.goal_text.empty() ? 0 : goal.goal_text.size() + 1) : 0;
  }

  std::string& text = out.text;
  text.reserve(tmpl.preamble.size() + attack_case.instruction.size() + attack_case.data.size() +
               injected.size() + 64);
  text += tmpl.preamble;
  text += "\n\n";
  text += tmpl.instruction_tag;
  text += '\n';
  text += attack_case.instruction;
  text += "\n\n";
  text += tmpl.input_tag;
  text += '\n';

  std::size_t injected_at = std::string::npos;
  switch (position) {
    case InjectionPosition::data_start:
      if (!injected.empty()) {
        injected_at = text.size();
        text += injected;
        text += ' ';
      }
      text += attack_case.data;
      text += "\n\n";
      break;
    case InjectionPosition::data_end:
      text += attack_case.data;
      if (!injected.empty()) {
        text += ' ';
        injected_at = text.size();
        text += injected;
      }
      text += "\n\n";
      break;
    case InjectionPosition::before_response_tag:
      text += attack_case.data;
      text += "\n\n";
      if (!injected.empty()) {
        injected_at = text.size();
        text += injected;
      }
      break;
  }
  text += tmpl.response_tag;
  text += '\n';

  if (injected_at != std::string::npos) {
    if (goal_off != std::string::npos) {
      out.goal_span = Span{injected_at + goal_off, injected_at + goal_off + goal.goal_text.size()};
    }
    if (adv_off != std::string::npos) {
      out.adv_span = Span{injected_at + adv_off, injected_at + adv_off + adv.size()};
    }
  }

  for (const std::string* tag : {&tmpl.instruction_tag, &tmpl.input_tag, &tmpl.response_tag}) {
    if (attack_case.instruction.find(*tag) != std::string::npos ||
        attack_case.data.find(*tag) != std::string::npos) {
      out.tag_collision = true;
    }
  }
  return out;
}

TokenView token_view(const AssembledPrompt& prompt) {
  TokenView out;
  out.tokens = encode(prompt.text);
  out.adv_span = prompt.adv_span;
  return out;
}

}  // namespace oet
