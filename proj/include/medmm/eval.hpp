#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "medmm/synth.hpp"

namespace medmm {

enum class AnswerType { Open, Closed };
enum class Split { Train, Val, Test };

std::string to_string(AnswerType t);
std::string to_string(Split s);
AnswerType parse_answer_type(std::string_view s);  // case-insensitive, trims
Split parse_split(std::string_view s);              // train | val | validate | test

struct VqaItem {
  std::string qid;
  std::string image;
  std::string question;
  std::string answer;
  AnswerType answer_type = AnswerType::Open;
  Split split = Split::Test;
  bool operator==(const VqaItem&) const = default;
};

struct Prediction {
  std::string qid;
  std::string text;
};

// Lowercase, map every byte outside [a-z0-9] to a space, split on spaces.
std::vector<std::string> normalize(std::string_view text);

// Fraction of CLOSED items whose normalized prediction equals the
// normalized answer token-for-token.
double closed_accuracy(const std::vector<Prediction>& preds, const std::vector<VqaItem>& items);

// |unique(answer tokens) ∩ unique(pred tokens)| / |unique(answer tokens)|.
double open_recall(std::string_view pred, std::string_view answer);

struct SplitStats {
  size_t total = 0;
  size_t open = 0;
  size_t closed = 0;
  size_t images = 0;
  bool operator==(const SplitStats&) const = default;
};

std::map<Split, SplitStats> dataset_stats(const std::vector<VqaItem>& items);

struct DomainStats {
  size_t images = 0;
  size_t qas = 0;
  bool operator==(const DomainStats&) const = default;
};

// Domain label of a record: a "domain" string, or the first true key of a
// {"chest_xray": bool, "mri": bool, ...} object mapped to its display name.
// Records without one are "Unlabeled".
std::string record_domain(const InstructRecord& r);
std::map<std::string, DomainStats> instruct_stats(const std::vector<InstructRecord>& records);

struct EvalReport {
  std::optional<double> closed_accuracy;  // absent when no CLOSED items
  std::optional<double> open_recall;      // absent when no OPEN items
  size_t n_closed = 0;
  size_t n_open = 0;
  std::vector<std::pair<std::string, double>> per_item;  // item order

  // Mean of the present columns.
  std::optional<double> average() const;
};

EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<VqaItem>& items);

// Open / Closed / Average table; absent cells print as "/".
std::string render_report(const EvalReport& report, const std::string& dataset);
std::string report_json(const EvalReport& report, const std::string& dataset);

std::string render_dataset_stats(const std::map<Split, SplitStats>& stats);
std::string render_instruct_stats(const std::map<std::string, DomainStats>& stats);

// Normalized JSON-lines formats.
std::vector<VqaItem> parse_vqa_jsonl(std::string_view text);
std::string to_vqa_jsonl(const std::vector<VqaItem>& items);
std::vector<Prediction> parse_predictions_jsonl(std::string_view text);

enum class DatasetFormat { Normalized, VqaRad, Slake, PathVqa };
DatasetFormat parse_dataset_format(std::string_view name);

// Converts a source dataset file to VqaItems.
//  VqaRad: the public JSON list; split from phrase_type ("test_*" is test).
//    `split` filters when given.
//  Slake: one split file (train/validate/test.json); English rows only.
//    `split` labels the rows (defaults to test).
//  PathVqa: JSON-lines {image, question, answer[, answer_type]}; yes/no
//    answers are CLOSED when the type is absent. `split` labels the rows.
//  Normalized: parse_vqa_jsonl, filtered by `split` when given.
std::vector<VqaItem> ingest_dataset(DatasetFormat format, std::string_view text,
                                    std::optional<Split> split = std::nullopt);
std::vector<VqaItem> ingest_dataset_file(DatasetFormat format, const std::filesystem::path& path,
                                         std::optional<Split> split = std::nullopt);

}  // namespace medmm
