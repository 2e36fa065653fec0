#include "oet/datasets.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oet/errors.hpp"
#include "oet/rng.hpp"

namespace oet {

using json = nlohmann::json;

AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "generic_jsonl") return AdapterKind::generic_jsonl;
  if (s == "generic_csv") return AdapterKind::generic_csv;
  if (s == "squad_json") return AdapterKind::squad_json;
  throw config_error("unknown adapter kind: " + s);
}

const char* to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::generic_csv: return "generic_csv";
    case AdapterKind::squad_json: return "squad_json";
    case AdapterKind::generic_jsonl: break;
  }
  return "generic_jsonl";
}

void AdapterSpec::validate() const {
  if (kind == AdapterKind::squad_json) return;  // layout is fixed
  for (const char* field : {"instruction", "data", "reference_answer"}) {
    if (!mapping.contains(field)) {
      throw config_error(std::string("adapter mapping missing field: ") + field);
    }
  }
}

namespace {

struct RawRecord {
  std::string instruction;
  std::string data;
  std::string reference_answer;
  std::string domain;  // optional per-record domain
};

std::string json_field_as_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_float()) {
    std::ostringstream os;
    os << v.get<double>();
    return os.str();
  }
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

std::vector<RawRecord> read_jsonl_records(const std::string& path, const AdapterSpec& adapter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("convert: cannot open " + path);

  std::vector<RawRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw data_error("convert: " + path + " record " + std::to_string(line_no) +
                       ": invalid JSON (" + e.what() + ")");
    }
    RawRecord rec;
    auto pick = [&](const char* field, std::string RawRecord::* member, bool required) {
      auto it = adapter.mapping.find(field);
      if (it == adapter.mapping.end()) return;
      if (!obj.contains(it->second)) {
        if (required) {
          throw data_error("convert: " + path + " record " + std::to_string(line_no) +
                           ": missing field \"" + it->second + "\"");
        }
        return;
      }
      rec.*member = json_field_as_string(obj.at(it->second));
    };
    pick("instruction", &RawRecord::instruction, true);
    pick("data", &RawRecord::data, true);
    pick("reference_answer", &RawRecord::reference_answer, true);
    pick("domain", &RawRecord::domain, false);
    records.push_back(std::move(rec));
  }
  return records;
}

// Minimal RFC-4180 CSV reader: quoted fields, doubled quotes, embedded
// newlines inside quotes.
std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("convert: cannot open " + path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < content.size(); ++i) {
    const char c = content[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < content.size() && content[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      if (row.size() > 1 || !row[0].empty()) rows.push_back(std::move(row));
      row.clear();
    } else {
      field.push_back(c);
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<RawRecord> read_csv_records(const std::string& path, const AdapterSpec& adapter) {
  auto rows = read_csv(path);
  if (rows.empty()) return {};

  const std::vector<std::string>& header = rows.front();
  auto column = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };

  struct Col {
    std::string RawRecord::* member;
    int index;
    bool required;
  };
  std::vector<Col> cols;
  auto bind = [&](const char* field, std::string RawRecord::* member, bool required) {
    auto it = adapter.mapping.find(field);
    if (it == adapter.mapping.end()) return;
    const int idx = column(it->second);
    if (idx < 0 && required) {
      throw data_error("convert: " + path + ": header has no column \"" + it->second + "\"");
    }
    if (idx >= 0) cols.push_back({member, idx, required});
  };
  bind("instruction", &RawRecord::instruction, true);
  bind("data", &RawRecord::data, true);
  bind("reference_answer", &RawRecord::reference_answer, true);
  bind("domain", &RawRecord::domain, false);

  std::vector<RawRecord> records;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    RawRecord rec;
    for (const Col& c : cols) {
      if (static_cast<std::size_t>(c.index) >= rows[r].size()) {
        if (c.required) {
          throw data_error("convert: " + path + " record " + std::to_string(r) +
                           ": row has too few columns");
        }
        continue;
      }
      rec.*c.member = rows[r][static_cast<std::size_t>(c.index)];
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<RawRecord> read_squad_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("convert: cannot open " + path);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw data_error("convert: " + path + ": invalid JSON (" + std::string(e.what()) + ")");
  }

  std::vector<RawRecord> records;
  int index = 0;
  try {
    for (const json& article : root.at("data")) {
      for (const json& para : article.at("paragraphs")) {
        const std::string context = para.at("context").get<std::string>();
        for (const json& qa : para.at("qas")) {
          ++index;
          RawRecord rec;
          rec.instruction = qa.at("question").get<std::string>();
          rec.data = context;
          const json& answers = qa.at("answers");
          if (answers.is_array() && !answers.empty()) {
            rec.reference_answer = answers.front().at("text").get<std::string>();
          }
          records.push_back(std::move(rec));
        }
      }
    }
  } catch (const json::exception& e) {
    throw data_error("convert: " + path + " record " + std::to_string(index + 1) +
                     ": unexpected layout (" + e.what() + ")");
  }
  return records;
}

json case_to_json(const AttackCase& c) {
  return json{{"id", c.id},
              {"dataset", c.dataset},
              {"domain", c.domain},
              {"instruction", c.instruction},
              {"data", c.data},
              {"reference_answer", c.reference_answer}};
}

AttackCase case_from_json(const json& obj, const std::string& where) {
  static const std::vector<std::string> keys = {"id",          "dataset", "domain",
                                                "instruction", "data",    "reference_answer"};
  if (!obj.is_object()) throw data_error(where + ": not a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const auto& k : keys) known = known || (item.key() == k);
    if (!known) throw data_error(where + ": unexpected key \"" + item.key() + "\"");
  }
  AttackCase c;
  try {
    c.id = obj.at("id").get<std::string>();
    c.dataset = obj.at("dataset").get<std::string>();
    c.domain = obj.at("domain").get<std::string>();
    c.instruction = obj.at("instruction").get<std::string>();
    c.data = obj.at("data").get<std::string>();
    c.reference_answer = obj.at("reference_answer").get<std::string>();
  } catch (const json::exception& e) {
    throw data_error(where + ": " + e.what());
  }
  return c;
}

// JSON strings must be UTF-8; raw byte content (adversarial strings ride
// along in responses) is serialized with the replacement handler. Dumps are
// single-line for JSONL.
std::string dump_line(const json& obj) {
  return obj.dump(-1, ' ', false, json::error_handler_t::replace);
}

}  // namespace

DatasetSplit convert(const std::string& raw_path, const std::string& dataset_name,
                     const std::string& domain, const AdapterSpec& adapter, int n_test,
                     int n_train, std::uint64_t seed) {
  if (n_test < 0 || n_train < 0) throw config_error("convert: negative split size");
  adapter.validate();

  std::vector<RawRecord> records;
  switch (adapter.kind) {
    case AdapterKind::generic_jsonl: records = read_jsonl_records(raw_path, adapter); break;
    case AdapterKind::generic_csv: records = read_csv_records(raw_path, adapter); break;
    case AdapterKind::squad_json: records = read_squad_records(raw_path); break;
  }

  const std::size_t need = static_cast<std::size_t>(n_test) + static_cast<std::size_t>(n_train);
  if (records.size() < need) {
    throw data_error("convert: " + raw_path + " has " + std::to_string(records.size()) +
                     " records, need " + std::to_string(need));
  }

  Lcg64 rng(seed);
  rng.shuffle(records);

  DatasetSplit split;
  for (std::size_t i = 0; i < need; ++i) {
    const RawRecord& rec = records[i];
    if (rec.instruction.empty() || rec.data.empty()) {
      throw data_error("convert: " + raw_path + ": shuffled record " + std::to_string(i) +
                       " has an empty instruction or data field");
    }
    AttackCase c;
    c.id = dataset_name + "-" + std::to_string(i);
    c.dataset = dataset_name;
    c.domain = rec.domain.empty() ? domain : rec.domain;
    c.instruction = rec.instruction;
    c.data = rec.data;
    c.reference_answer = rec.reference_answer;
    if (i < static_cast<std::size_t>(n_test)) {
      split.test.push_back(std::move(c));
    } else {
      split.train.push_back(std::move(c));
    }
  }
  return split;
}

DatasetSplit convert_composite(const std::string& dataset_name,
                               const std::vector<SubsetSpec>& subsets, std::uint64_t seed) {
  DatasetSplit out;
  for (const SubsetSpec& sub : subsets) {
    const std::uint64_t sub_seed = derive_seed(seed, dataset_name + "/" + sub.name);
    DatasetSplit part = convert(sub.raw_path, dataset_name + "-" + sub.name, sub.domain,
                                sub.adapter, sub.n_test, sub.n_train, sub_seed);
    out.test.insert(out.test.end(), part.test.begin(), part.test.end());
    out.train.insert(out.train.end(), part.train.begin(), part.train.end());
  }
  return out;
}

void save_cases(const std::vector<AttackCase>& cases, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("save_cases: cannot open " + path);
  for (const AttackCase& c : cases) {
    out << dump_line(case_to_json(c)) << '\n';
  }
  if (!out) throw data_error("save_cases: write failed for " + path);
}

std::vector<AttackCase> load_cases(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("load_cases: cannot open " + path);
  std::vector<AttackCase> cases;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception&) {
      throw data_error("load_cases: " + path + " line " + std::to_string(line_no) +
                       ": invalid JSON");
    }
    cases.push_back(case_from_json(obj, path + " line " + std::to_string(line_no)));
  }
  return cases;
}

void save_split(const DatasetSplit& split, const std::string& stem) {
  save_cases(split.test, stem + ".test.jsonl");
  save_cases(split.train, stem + ".train.jsonl");
}

DatasetSplit load_split(const std::string& stem) {
  DatasetSplit split;
  split.test = load_cases(stem + ".test.jsonl");
  split.train = load_cases(stem + ".train.jsonl");
  return split;
}

std::vector<std::string> validate(const DatasetSplit& split) {
  std::vector<std::string> violations;
  std::map<std::string, int> seen_test, seen_train;

  auto scan = [&](const std::vector<AttackCase>& cases, const char* which,
                  std::map<std::string, int>& seen) {
    for (const AttackCase& c : cases) {
      if (++seen[c.id] == 2) {
        violations.push_back(std::string("duplicate id in ") + which + ": " + c.id);
      }
      if (c.instruction.empty()) {
        violations.push_back(std::string("empty instruction in ") + which + ": " + c.id);
      }
      if (c.data.empty()) {
        violations.push_back(std::string("empty data in ") + which + ": " + c.id);
      }
    }
  };
  scan(split.test, "test", seen_test);
  scan(split.train, "train", seen_train);

  for (const auto& [id, n] : seen_train) {
    if (seen_test.contains(id)) {
      violations.push_back("id in both train and test: " + id);
    }
  }
  return violations;
}

}  // namespace oet
