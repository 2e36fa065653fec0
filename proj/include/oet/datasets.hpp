#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace oet {

// One converted QA example in the unified attack-case format.
struct AttackCase {
  std::string id;
  std::string dataset;
  std::string domain;
  std::string instruction;      // the task directive
  std::string data;             // context passage the injection rides in
  std::string reference_answer;

  bool operator==(const AttackCase&) const = default;
};

struct DatasetSplit {
  std::vector<AttackCase> train;
  std::vector<AttackCase> test;
};

enum class AdapterKind { generic_jsonl, generic_csv, squad_json };

AdapterKind adapter_kind_from_string(const std::string& s);
const char* to_string(AdapterKind k);

// How raw records map onto AttackCase fields. `mapping` keys are the
// AttackCase field names ("instruction", "data", "reference_answer",
// optionally "domain"); values are source field / column names. squad_json
// ignores the mapping (the SQuAD layout fixes it).
struct AdapterSpec {
  AdapterKind kind = AdapterKind::generic_jsonl;
  std::map<std::string, std::string> mapping;

  void validate() const;
};

// Reads the raw file, shuffles records with the documented 64-bit LCG
// seeded by `seed`, then takes the first n_test records as test and the
// next n_train as train. Ids are "<dataset>-<index>" in post-shuffle order.
// Throws data_error on malformed records (naming the record index) or when
// fewer than n_test + n_train records exist.
DatasetSplit convert(const std::string& raw_path, const std::string& dataset_name,
                     const std::string& domain, const AdapterSpec& adapter, int n_test,
                     int n_train, std::uint64_t seed);

// One subset of a composite dataset (e.g. the code/email/table subdomains):
// converted independently, then merged.
struct SubsetSpec {
  std::string name;  // appended to the dataset name for ids
  std::string domain;
  std::string raw_path;
  AdapterSpec adapter;
  int n_test = 0;
  int n_train = 0;
};
DatasetSplit convert_composite(const std::string& dataset_name,
                               const std::vector<SubsetSpec>& subsets, std::uint64_t seed);

// JSONL persistence: <stem>.test.jsonl and <stem>.train.jsonl, one case
// object per line with exactly the keys {"id","dataset","domain",
// "instruction","data","reference_answer"}.
void save_split(const DatasetSplit& split, const std::string& stem);
DatasetSplit load_split(const std::string& stem);

std::vector<AttackCase> load_cases(const std::string& path);
void save_cases(const std::vector<AttackCase>& cases, const std::string& path);

// Every invariant violation in the split (duplicate ids, empty
// instruction/data, train/test overlap). Empty result means valid.
std::vector<std::string> validate(const DatasetSplit& split);

}  // namespace oet
