#include "oet/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "oet/errors.hpp"
#include "oet/rng.hpp"

namespace oet {

using json = nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw config_error(path + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || (item.key() == k);
    if (!known) throw config_error("unknown key \"" + path + "." + item.key() + "\"");
  }
}

const json& need(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) throw config_error("missing key \"" + path + "." + key + "\"");
  return obj.at(key);
}

template <class T>
T get_as(const json& v, const std::string& path) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw config_error("bad value at \"" + path + "\"");
  }
}

template <class T>
void maybe(const json& obj, const std::string& path, const char* key, T& out) {
  if (obj.contains(key)) out = get_as<T>(obj.at(key), path + "." + key);
}

AdapterSpec parse_adapter(const json& obj, const std::string& path) {
  AdapterSpec spec;
  spec.kind = adapter_kind_from_string(get_as<std::string>(need(obj, path, "adapter"), path + ".adapter"));
  if (obj.contains("mapping")) {
    spec.mapping = get_as<std::map<std::string, std::string>>(obj.at("mapping"), path + ".mapping");
    static const std::set<std::string> fields = {"instruction", "data", "reference_answer", "domain"};
    for (const auto& [field, source] : spec.mapping) {
      if (!fields.contains(field)) {
        throw config_error("unknown key \"" + path + ".mapping." + field + "\"");
      }
    }
  }
  if (spec.kind != AdapterKind::squad_json) spec.validate();
  return spec;
}

TargetSpec parse_target(const json& obj, const std::string& path) {
  check_keys(obj, path,
             {"name", "kind", "temperature", "max_new_tokens", "weights", "base_url", "model",
              "max_retries", "max_in_flight", "trigger", "response"});
  TargetSpec t;
  t.name = get_as<std::string>(need(obj, path, "name"), path + ".name");
  const std::string kind = get_as<std::string>(need(obj, path, "kind"), path + ".kind");
  maybe(obj, path, "temperature", t.temperature);
  maybe(obj, path, "max_new_tokens", t.max_new_tokens);

  if (kind == "local") {
    t.kind = TargetKind::local;
    t.weights = get_as<std::string>(need(obj, path, "weights"), path + ".weights");
  } else if (kind == "remote") {
    t.kind = TargetKind::remote;
    t.base_url = get_as<std::string>(need(obj, path, "base_url"), path + ".base_url");
    t.model = get_as<std::string>(need(obj, path, "model"), path + ".model");
    maybe(obj, path, "max_retries", t.max_retries);
    maybe(obj, path, "max_in_flight", t.max_in_flight);
  } else if (kind == "mock") {
    t.kind = TargetKind::mock;
    t.trigger = get_as<std::string>(need(obj, path, "trigger"), path + ".trigger");
    t.response = get_as<std::string>(need(obj, path, "response"), path + ".response");
  } else {
    throw config_error("bad value at \"" + path + ".kind\": " + kind);
  }
  if (t.name.empty()) throw config_error(path + ".name must be nonempty");
  return t;
}

DatasetSubsetSpec parse_subset(const json& obj, const std::string& path) {
  check_keys(obj, path, {"name", "domain", "raw", "adapter", "mapping", "n_test", "n_train"});
  DatasetSubsetSpec s;
  s.name = get_as<std::string>(need(obj, path, "name"), path + ".name");
  s.raw = get_as<std::string>(need(obj, path, "raw"), path + ".raw");
  s.adapter = parse_adapter(obj, path);
  maybe(obj, path, "domain", s.domain);
  s.n_test = get_as<int>(need(obj, path, "n_test"), path + ".n_test");
  s.n_train = get_as<int>(need(obj, path, "n_train"), path + ".n_train");
  return s;
}

DatasetSpec parse_dataset(const json& obj, const std::string& path) {
  check_keys(obj, path,
             {"name", "domain", "raw", "adapter", "mapping", "n_test", "n_train", "subsets"});
  DatasetSpec d;
  d.name = get_as<std::string>(need(obj, path, "name"), path + ".name");
  maybe(obj, path, "domain", d.domain);
  if (obj.contains("subsets")) {
    const json& subs = obj.at("subsets");
    if (!subs.is_array() || subs.empty()) {
      throw config_error(path + ".subsets must be a nonempty array");
    }
    for (std::size_t i = 0; i < subs.size(); ++i) {
      d.subsets.push_back(parse_subset(subs.at(i), path + ".subsets[" + std::to_string(i) + "]"));
    }
  } else {
    d.raw = get_as<std::string>(need(obj, path, "raw"), path + ".raw");
    d.adapter = parse_adapter(obj, path);
    d.n_test = get_as<int>(need(obj, path, "n_test"), path + ".n_test");
    d.n_train = get_as<int>(need(obj, path, "n_train"), path + ".n_train");
  }
  if (d.name.empty()) throw config_error(path + ".name must be nonempty");
  return d;
}

OptimizerConfig parse_optimizer(const json& obj, const std::string& path, std::uint64_t global_seed) {
  check_keys(obj, path,
             {"method", "steps", "adv_len", "charset", "seed", "early_stop_nats_per_token", "gcg",
              "uat", "autoprompt", "gbda", "pez", "autodan", "pair"});
  OptimizerConfig cfg;
  cfg.seed = derive_seed(global_seed, "train");
  maybe(obj, path, "method", cfg.method);
  maybe(obj, path, "steps", cfg.steps);
  maybe(obj, path, "adv_len", cfg.adv_len);
  maybe(obj, path, "seed", cfg.seed);
  maybe(obj, path, "early_stop_nats_per_token", cfg.early_stop_nats_per_token);
  if (obj.contains("charset")) {
    cfg.charset = charset_filter_from_string(
        get_as<std::string>(obj.at("charset"), path + ".charset"));
  }
  if (obj.contains("gcg")) {
    const json& o = obj.at("gcg");
    check_keys(o, path + ".gcg", {"top_k", "batch", "greedy_accept"});
    maybe(o, path + ".gcg", "top_k", cfg.gcg.top_k);
    maybe(o, path + ".gcg", "batch", cfg.gcg.batch);
    maybe(o, path + ".gcg", "greedy_accept", cfg.gcg.greedy_accept);
  }
  if (obj.contains("uat")) {
    const json& o = obj.at("uat");
    check_keys(o, path + ".uat", {"candidates"});
    maybe(o, path + ".uat", "candidates", cfg.uat.candidates);
  }
  if (obj.contains("autoprompt")) {
    const json& o = obj.at("autoprompt");
    check_keys(o, path + ".autoprompt", {"candidates"});
    maybe(o, path + ".autoprompt", "candidates", cfg.autoprompt.candidates);
  }
  if (obj.contains("gbda")) {
    const json& o = obj.at("gbda");
    check_keys(o, path + ".gbda", {"population", "temp_start", "temp_end", "learning_rate"});
    maybe(o, path + ".gbda", "population", cfg.gbda.population);
    maybe(o, path + ".gbda", "temp_start", cfg.gbda.temp_start);
    maybe(o, path + ".gbda", "temp_end", cfg.gbda.temp_end);
    maybe(o, path + ".gbda", "learning_rate", cfg.gbda.learning_rate);
  }
  if (obj.contains("pez")) {
    const json& o = obj.at("pez");
    check_keys(o, path + ".pez", {"learning_rate"});
    maybe(o, path + ".pez", "learning_rate", cfg.pez.learning_rate);
  }
  if (obj.contains("autodan")) {
    const json& o = obj.at("autodan");
    check_keys(o, path + ".autodan", {"population", "elite", "mutation_rate", "crossover_rate"});
    maybe(o, path + ".autodan", "population", cfg.autodan.population);
    maybe(o, path + ".autodan", "elite", cfg.autodan.elite);
    maybe(o, path + ".autodan", "mutation_rate", cfg.autodan.mutation_rate);
    maybe(o, path + ".autodan", "crossover_rate", cfg.autodan.crossover_rate);
  }
  if (obj.contains("pair")) {
    const json& o = obj.at("pair");
    check_keys(o, path + ".pair", {"max_rounds", "attacker"});
    maybe(o, path + ".pair", "max_rounds", cfg.pair.max_rounds);
    maybe(o, path + ".pair", "attacker", cfg.pair.attacker_target);
  }
  cfg.validate();
  return cfg;
}

ProtocolConfig parse_protocol(const json& obj, const std::string& path) {
  check_keys(obj, path,
             {"trials", "temperature", "max_new_tokens", "asr_modes", "workers", "case_sensitive"});
  ProtocolConfig p;
  maybe(obj, path, "trials", p.trials);
  maybe(obj, path, "temperature", p.temperature);
  maybe(obj, path, "max_new_tokens", p.max_new_tokens);
  maybe(obj, path, "workers", p.workers);
  maybe(obj, path, "case_sensitive", p.case_sensitive);
  if (obj.contains("asr_modes")) {
    p.asr_modes.clear();
    for (const json& m : obj.at("asr_modes")) {
      p.asr_modes.push_back(asr_mode_from_string(get_as<std::string>(m, path + ".asr_modes")));
    }
    if (p.asr_modes.empty()) throw config_error(path + ".asr_modes must be nonempty");
  }
  if (p.trials < 1) throw config_error(path + ".trials must be >= 1");
  if (p.workers < 1) throw config_error(path + ".workers must be >= 1");
  return p;
}

}  // namespace

RunConfig config_from_json(const json& root) {
  check_keys(root, "$",
             {"seed", "output_dir", "targets", "datasets", "goal", "template",
              "injection_position", "optimizer", "protocol"});

  RunConfig cfg;
  cfg.seed = get_as<std::uint64_t>(need(root, "$", "seed"), "$.seed");
  cfg.output_dir = get_as<std::string>(need(root, "$", "output_dir"), "$.output_dir");
  if (cfg.output_dir.empty()) throw config_error("$.output_dir must be nonempty");

  if (root.contains("targets")) {
    const json& ts = root.at("targets");
    if (!ts.is_array()) throw config_error("$.targets must be an array");
    for (std::size_t i = 0; i < ts.size(); ++i) {
      cfg.targets.push_back(parse_target(ts.at(i), "$.targets[" + std::to_string(i) + "]"));
    }
  }
  if (root.contains("datasets")) {
    const json& ds = root.at("datasets");
    if (!ds.is_array()) throw config_error("$.datasets must be an array");
    for (std::size_t i = 0; i < ds.size(); ++i) {
      cfg.datasets.push_back(parse_dataset(ds.at(i), "$.datasets[" + std::to_string(i) + "]"));
    }
  }

  if (root.contains("goal")) {
    const json& g = root.at("goal");
    check_keys(g, "$.goal", {"goal_text", "target_sentence"});
    maybe(g, "$.goal", "goal_text", cfg.goal.goal_text);
    maybe(g, "$.goal", "target_sentence", cfg.goal.target_sentence);
    cfg.goal.validate();
  }
  if (root.contains("template")) {
    const json& t = root.at("template");
    check_keys(t, "$.template",
               {"preamble", "instruction_tag", "input_tag", "response_tag", "goal_first"});
    maybe(t, "$.template", "preamble", cfg.tmpl.preamble);
    maybe(t, "$.template", "instruction_tag", cfg.tmpl.instruction_tag);
    maybe(t, "$.template", "input_tag", cfg.tmpl.input_tag);
    maybe(t, "$.template", "response_tag", cfg.tmpl.response_tag);
    maybe(t, "$.template", "goal_first", cfg.tmpl.goal_first);
    cfg.tmpl.validate();
  }
  if (root.contains("injection_position")) {
    cfg.position = injection_position_from_string(
        get_as<std::string>(root.at("injection_position"), "$.injection_position"));
  }
  cfg.optimizer = root.contains("optimizer")
                      ? parse_optimizer(root.at("optimizer"), "$.optimizer", cfg.seed)
                      : [&] {
                          OptimizerConfig oc;
                          oc.seed = derive_seed(cfg.seed, "train");
                          return oc;
                        }();
  if (root.contains("protocol")) cfg.protocol = parse_protocol(root.at("protocol"), "$.protocol");

  // Cross-reference checks.
  std::set<std::string> names;
  for (const TargetSpec& t : cfg.targets) {
    if (!names.insert(t.name).second) throw config_error("duplicate target name: " + t.name);
  }
  std::set<std::string> dnames;
  for (const DatasetSpec& d : cfg.datasets) {
    if (!dnames.insert(d.name).second) throw config_error("duplicate dataset name: " + d.name);
  }
  if (cfg.optimizer.method == "pair" && !cfg.optimizer.pair.attacker_target.empty() &&
      !names.contains(cfg.optimizer.pair.attacker_target)) {
    throw config_error("$.optimizer.pair.attacker references unknown target \"" +
                       cfg.optimizer.pair.attacker_target + "\"");
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open config file: " + path);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw config_error("config " + path + ": " + e.what());
  }
  return config_from_json(root);
}

json effective_config_json(const RunConfig& config) {
  json targets = json::array();
  for (const TargetSpec& t : config.targets) {
    json obj = {{"name", t.name},
                {"kind", to_string(t.kind)},
                {"temperature", t.temperature},
                {"max_new_tokens", t.max_new_tokens}};
    if (t.kind == TargetKind::local) obj["weights"] = t.weights;
    if (t.kind == TargetKind::remote) {
      obj["base_url"] = t.base_url;
      obj["model"] = t.model;
      obj["max_retries"] = t.max_retries;
      obj["max_in_flight"] = t.max_in_flight;
    }
    if (t.kind == TargetKind::mock) {
      obj["trigger"] = t.trigger;
      obj["response"] = t.response;
    }
    targets.push_back(std::move(obj));
  }

  json datasets = json::array();
  for (const DatasetSpec& d : config.datasets) {
    json obj = {{"name", d.name}};
    if (d.is_composite()) {
      json subs = json::array();
      for (const DatasetSubsetSpec& s : d.subsets) {
        subs.push_back(json{{"name", s.name},
                            {"domain", s.domain},
                            {"raw", s.raw},
                            {"adapter", to_string(s.adapter.kind)},
                            {"mapping", s.adapter.mapping},
                            {"n_test", s.n_test},
                            {"n_train", s.n_train}});
      }
      obj["subsets"] = std::move(subs);
    } else {
      obj["domain"] = d.domain;
      obj["raw"] = d.raw;
      obj["adapter"] = to_string(d.adapter.kind);
      obj["mapping"] = d.adapter.mapping;
      obj["n_test"] = d.n_test;
      obj["n_train"] = d.n_train;
    }
    datasets.push_back(std::move(obj));
  }

  json asr_modes = json::array();
  for (AsrMode m : config.protocol.asr_modes) asr_modes.push_back(to_string(m));

  return json{
      {"seed", config.seed},
      {"output_dir", config.output_dir},
      {"targets", targets},
      {"datasets", datasets},
      {"goal", {{"goal_text", config.goal.goal_text}, {"target_sentence", config.goal.target_sentence}}},
      {"template",
       {{"preamble", config.tmpl.preamble},
        {"instruction_tag", config.tmpl.instruction_tag},
        {"input_tag", config.tmpl.input_tag},
        {"response_tag", config.tmpl.response_tag},
        {"goal_first", config.tmpl.goal_first}}},
      {"injection_position", to_string(config.position)},
      {"optimizer",
       {{"method", config.optimizer.method},
        {"steps", config.optimizer.steps},
        {"adv_len", config.optimizer.adv_len},
        {"charset", to_string(config.optimizer.charset)},
        {"seed", config.optimizer.seed},
        {"early_stop_nats_per_token", config.optimizer.early_stop_nats_per_token},
        {"gcg",
         {{"top_k", config.optimizer.gcg.top_k},
          {"batch", config.optimizer.gcg.batch},
          {"greedy_accept", config.optimizer.gcg.greedy_accept}}},
        {"uat", {{"candidates", config.optimizer.uat.candidates}}},
        {"autoprompt", {{"candidates", config.optimizer.autoprompt.candidates}}},
        {"gbda",
         {{"population", config.optimizer.gbda.population},
          {"temp_start", config.optimizer.gbda.temp_start},
          {"temp_end", config.optimizer.gbda.temp_end},
          {"learning_rate", config.optimizer.gbda.learning_rate}}},
        {"pez", {{"learning_rate", config.optimizer.pez.learning_rate}}},
        {"autodan",
         {{"population", config.optimizer.autodan.population},
          {"elite", config.optimizer.autodan.elite},
          {"mutation_rate", config.optimizer.autodan.mutation_rate},
          {"crossover_rate", config.optimizer.autodan.crossover_rate}}},
        {"pair",
         {{"max_rounds", config.optimizer.pair.max_rounds},
          {"attacker", config.optimizer.pair.attacker_target}}}}},
      {"protocol",
       {{"trials", config.protocol.trials},
        {"temperature", config.protocol.temperature},
        {"max_new_tokens", config.protocol.max_new_tokens},
        {"asr_modes", asr_modes},
        {"workers", config.protocol.workers},
        {"case_sensitive", config.protocol.case_sensitive}}},
  };
}

const TargetSpec& find_target_spec(const RunConfig& config, const std::string& name) {
  for (const TargetSpec& t : config.targets) {
    if (t.name == name) return t;
  }
  throw config_error("unknown target: " + name);
}

const DatasetSpec& find_dataset_spec(const RunConfig& config, const std::string& name) {
  for (const DatasetSpec& d : config.datasets) {
    if (d.name == name) return d;
  }
  throw config_error("unknown dataset: " + name);
}

TargetHandle resolve_target(const RunConfig& config, const std::string& name) {
  const TargetSpec& spec = find_target_spec(config, name);
  GenParams defaults;
  defaults.temperature = spec.temperature;
  defaults.max_new_tokens = spec.max_new_tokens;

  switch (spec.kind) {
    case TargetKind::local:
      return TargetHandle::local_target(spec.name, spec.weights, defaults);
    case TargetKind::remote: {
      RetryPolicy retry;
      retry.max_retries = spec.max_retries;
      return TargetHandle::remote_target(spec.name, spec.base_url, spec.model, defaults, retry,
                                         spec.max_in_flight);
    }
    case TargetKind::mock:
      break;
  }
  return TargetHandle::mock_target(spec.name, spec.trigger, spec.response, defaults);
}

DatasetSplit convert_dataset(const RunConfig& config, const DatasetSpec& spec) {
  const std::uint64_t seed = derive_seed(config.seed, "convert/" + spec.name);
  if (spec.is_composite()) {
    std::vector<SubsetSpec> subsets;
    for (const DatasetSubsetSpec& s : spec.subsets) {
      SubsetSpec sub;
      sub.name = s.name;
      sub.domain = s.domain.empty() ? s.name : s.domain;
      sub.raw_path = s.raw;
      sub.adapter = s.adapter;
      sub.n_test = s.n_test;
      sub.n_train = s.n_train;
      subsets.push_back(std::move(sub));
    }
    return convert_composite(spec.name, subsets, seed);
  }
  return convert(spec.raw, spec.name, spec.domain, spec.adapter, spec.n_test, spec.n_train, seed);
}

AttackProtocol attack_protocol(const RunConfig& config) {
  AttackProtocol p;
  p.trials = config.protocol.trials;
  p.gen.temperature = config.protocol.temperature;
  p.gen.max_new_tokens = config.protocol.max_new_tokens;
  p.workers = config.protocol.workers;
  return p;
}

}  // namespace oet
