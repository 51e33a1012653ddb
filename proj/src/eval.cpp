#include "medmm/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "medmm/error.hpp"
#include "medmm/tensor_io.hpp"

namespace medmm {

using ojson = nlohmann::ordered_json;

namespace {

std::string lower_trim(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c != ' ' && c != '\t' && c != '\r' && c != '\n')
      out.push_back(static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c));
  }
  return out;
}

std::string scalar_to_string(const ojson& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() || v.is_boolean()) return v.dump();
  throw std::invalid_argument("expected a string or number");
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  size_t pos = 0;
  size_t line_no = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      fn(ojson::parse(line), line_no);
    } catch (const ojson::exception& e) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

// Sum in qid order so aggregates do not depend on input order.
double ordered_mean(std::vector<std::pair<std::string, double>> scores) {
  std::sort(scores.begin(), scores.end());
  double sum = 0.0;
  for (const auto& [qid, s] : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

std::unordered_map<std::string, const Prediction*> index_predictions(
    const std::vector<Prediction>& preds) {
  std::unordered_map<std::string, const Prediction*> by_qid;
  for (const auto& p : preds) {
    if (!by_qid.emplace(p.qid, &p).second) {
      throw Error(ErrorCode::MalformedRecord, "duplicate prediction for qid '" + p.qid + "'");
    }
  }
  return by_qid;
}

[[noreturn]] void throw_missing(const std::vector<std::string>& qids) {
  std::string msg = std::to_string(qids.size()) + " item(s) without a prediction:";
  for (size_t i = 0; i < qids.size() && i < 20; ++i) msg += " " + qids[i];
  if (qids.size() > 20) msg += " ...";
  throw Error(ErrorCode::MissingPrediction, msg);
}

bool closed_match(std::string_view pred, std::string_view answer) {
  return normalize(pred) == normalize(answer);
}

std::string fmt_cell(const std::optional<double>& v) {
  if (!v) return "/";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

std::string pad(std::string s, size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

VqaItem vqa_from_json(const ojson& j) {
  VqaItem it;
  it.qid = scalar_to_string(j.at("qid"));
  it.image = j.at("image").get<std::string>();
  it.question = j.at("question").get<std::string>();
  it.answer = scalar_to_string(j.at("answer"));
  it.answer_type = parse_answer_type(j.at("answer_type").get<std::string>());
  it.split = parse_split(j.at("split").get<std::string>());
  return it;
}

void check_items(const std::vector<VqaItem>& items) {
  std::unordered_set<std::string> seen;
  for (const auto& it : items) {
    if (!seen.insert(it.qid).second) {
      throw Error(ErrorCode::DuplicateIds, "qid '" + it.qid + "' appears more than once");
    }
    if (normalize(it.answer).empty()) {
      throw Error(ErrorCode::MalformedRecord, "qid '" + it.qid + "' has an empty answer");
    }
  }
}

}  // namespace

std::string to_string(AnswerType t) { return t == AnswerType::Open ? "OPEN" : "CLOSED"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

AnswerType parse_answer_type(std::string_view s) {
  const std::string v = lower_trim(s);
  if (v == "open") return AnswerType::Open;
  if (v == "closed") return AnswerType::Closed;
  throw Error(ErrorCode::MalformedRecord, "answer_type '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  const std::string v = lower_trim(s);
  if (v == "train") return Split::Train;
  if (v == "val" || v == "validate" || v == "validation") return Split::Val;
  if (v == "test") return Split::Test;
  throw Error(ErrorCode::InvalidArgument, "split '" + std::string(s) + "'");
}

std::vector<std::string> normalize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    char c = ch;
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

double closed_accuracy(const std::vector<Prediction>& preds, const std::vector<VqaItem>& items) {
  const auto by_qid = index_predictions(preds);
  std::vector<std::string> missing;
  size_t n = 0;
  size_t correct = 0;
  for (const auto& it : items) {
    if (it.answer_type != AnswerType::Closed) continue;
    ++n;
    const auto p = by_qid.find(it.qid);
    if (p == by_qid.end()) {
      missing.push_back(it.qid);
      continue;
    }
    if (closed_match(p->second->text, it.answer)) ++correct;
  }
  if (!missing.empty()) throw_missing(missing);
  if (n == 0) throw Error(ErrorCode::EmptyClosedSet, "no CLOSED items to score");
  return static_cast<double>(correct) / static_cast<double>(n);
}

double open_recall(std::string_view pred, std::string_view answer) {
  const auto gt = normalize(answer);
  if (gt.empty()) {
    throw Error(ErrorCode::EmptyGroundTruth, "answer '" + std::string(answer) + "' has no tokens");
  }
  const std::set<std::string> truth(gt.begin(), gt.end());
  const auto pt = normalize(pred);
  const std::unordered_set<std::string> got(pt.begin(), pt.end());
  size_t hit = 0;
  for (const auto& t : truth) hit += got.count(t);
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::map<Split, SplitStats> dataset_stats(const std::vector<VqaItem>& items) {
  std::map<Split, SplitStats> out;
  std::map<Split, std::unordered_set<std::string>> images;
  for (const auto& it : items) {
    auto& s = out[it.split];
    ++s.total;
    ++(it.answer_type == AnswerType::Open ? s.open : s.closed);
    images[it.split].insert(it.image);
  }
  for (auto& [split, s] : out) s.images = images[split].size();
  return out;
}

std::string record_domain(const InstructRecord& r) {
  static const std::pair<const char*, const char*> kDomains[] = {
      {"chest_xray", "Chest X-Ray"}, {"ct_scan", "CT"},         {"mri", "MRI"},
      {"histology", "Histology"},    {"gross", "Pathology"},
  };
  if (!r.extra.contains("domain")) return "Unlabeled";
  const auto& d = r.extra.at("domain");
  if (d.is_string()) return d.get<std::string>();
  if (d.is_object()) {
    for (const auto& [key, label] : kDomains) {
      if (d.contains(key) && d.at(key).is_boolean() && d.at(key).get<bool>()) return label;
    }
    for (const auto& [k, v] : d.items()) {
      if (v.is_boolean() && v.get<bool>()) return k;
    }
  }
  return "Unlabeled";
}

std::map<std::string, DomainStats> instruct_stats(const std::vector<InstructRecord>& records) {
  std::map<std::string, DomainStats> out;
  std::map<std::string, std::unordered_set<std::string>> images;
  for (const auto& r : records) {
    const std::string domain = record_domain(r);
    auto& s = out[domain];
    images[domain].insert(r.image);
    for (size_t i = 0; i + 1 < r.conversations.size(); ++i) {
      if (r.conversations[i].from == "human" && r.conversations[i + 1].from == "gpt") {
        ++s.qas;
        ++i;
      }
    }
  }
  for (auto& [d, s] : out) s.images = images[d].size();
  return out;
}

std::optional<double> EvalReport::average() const {
  if (open_recall && closed_accuracy) return (*open_recall + *closed_accuracy) / 2.0;
  if (open_recall) return open_recall;
  return closed_accuracy;
}

EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<VqaItem>& items) {
  const auto by_qid = index_predictions(preds);
  std::unordered_set<std::string> known;
  std::vector<std::string> missing;
  for (const auto& it : items) {
    known.insert(it.qid);
    if (!by_qid.count(it.qid)) missing.push_back(it.qid);
  }
  if (!missing.empty()) throw_missing(missing);
  for (const auto& p : preds) {
    if (!known.count(p.qid)) {
      throw Error(ErrorCode::MalformedRecord, "prediction for unknown qid '" + p.qid + "'");
    }
  }

  EvalReport report;
  std::vector<std::pair<std::string, double>> open_scores, closed_scores;
  for (const auto& it : items) {
    const std::string& text = by_qid.at(it.qid)->text;
    double score;
    if (it.answer_type == AnswerType::Closed) {
      score = closed_match(text, it.answer) ? 1.0 : 0.0;
      closed_scores.emplace_back(it.qid, score);
    } else {
      score = open_recall(text, it.answer);
      open_scores.emplace_back(it.qid, score);
    }
    report.per_item.emplace_back(it.qid, score);
  }
  report.n_open = open_scores.size();
  report.n_closed = closed_scores.size();
  if (!open_scores.empty()) report.open_recall = ordered_mean(std::move(open_scores));
  if (!closed_scores.empty()) report.closed_accuracy = ordered_mean(std::move(closed_scores));
  return report;
}

std::string render_report(const EvalReport& report, const std::string& dataset) {
  const size_t w = std::max<size_t>(dataset.size(), 7) + 2;
  std::string out = pad("Dataset", w) + pad("Open", 10) + pad("Closed", 10) + "Average\n";
  out += pad(dataset, w) + pad(fmt_cell(report.open_recall), 10) +
         pad(fmt_cell(report.closed_accuracy), 10) + fmt_cell(report.average()) + "\n";
  out += "(n_open=" + std::to_string(report.n_open) +
         ", n_closed=" + std::to_string(report.n_closed) + ")\n";
  return out;
}

std::string report_json(const EvalReport& report, const std::string& dataset) {
  auto opt = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); };
  ojson j;
  j["dataset"] = dataset;
  j["open_recall"] = opt(report.open_recall);
  j["closed_accuracy"] = opt(report.closed_accuracy);
  j["average"] = opt(report.average());
  j["n_open"] = report.n_open;
  j["n_closed"] = report.n_closed;
  ojson items = ojson::array();
  for (const auto& [qid, score] : report.per_item) items.push_back({{"qid", qid}, {"score", score}});
  j["per_item"] = std::move(items);
  return j.dump(2) + "\n";
}

std::string render_dataset_stats(const std::map<Split, SplitStats>& stats) {
  std::string out = pad("Split", 8) + pad("Images", 10) + pad("QA Pairs", 10) + pad("Open", 10) +
                    "Closed\n";
  for (const auto& [split, s] : stats) {
    out += pad(to_string(split), 8) + pad(std::to_string(s.images), 10) +
           pad(std::to_string(s.total), 10) + pad(std::to_string(s.open), 10) +
           std::to_string(s.closed) + "\n";
  }
  return out;
}

std::string render_instruct_stats(const std::map<std::string, DomainStats>& stats) {
  size_t w = 8;
  for (const auto& [d, s] : stats) w = std::max(w, d.size() + 2);
  std::string out = pad("Domain", w) + pad("Images", 10) + "QAs\n";
  for (const auto& [d, s] : stats) {
    out += pad(d, w) + pad(std::to_string(s.images), 10) + std::to_string(s.qas) + "\n";
  }
  return out;
}

std::vector<VqaItem> parse_vqa_jsonl(std::string_view text) {
  std::vector<VqaItem> items;
  for_each_line(text, [&](const ojson& j, size_t) { items.push_back(vqa_from_json(j)); });
  check_items(items);
  return items;
}

std::string to_vqa_jsonl(const std::vector<VqaItem>& items) {
  std::string out;
  for (const auto& it : items) {
    ojson j;
    j["qid"] = it.qid;
    j["image"] = it.image;
    j["question"] = it.question;
    j["answer"] = it.answer;
    j["answer_type"] = to_string(it.answer_type);
    j["split"] = to_string(it.split);
    out += j.dump(-1, ' ', false, ojson::error_handler_t::replace) + "\n";
  }
  return out;
}

std::vector<Prediction> parse_predictions_jsonl(std::string_view text) {
  std::vector<Prediction> preds;
  for_each_line(text, [&](const ojson& j, size_t) {
    preds.push_back({scalar_to_string(j.at("qid")), j.at("text").get<std::string>()});
  });
  return preds;
}

DatasetFormat parse_dataset_format(std::string_view name) {
  const std::string v = lower_trim(name);
  if (v == "normalized" || v == "jsonl") return DatasetFormat::Normalized;
  if (v == "vqa-rad" || v == "vqarad") return DatasetFormat::VqaRad;
  if (v == "slake") return DatasetFormat::Slake;
  if (v == "pathvqa" || v == "path-vqa" || v == "vqa-path") return DatasetFormat::PathVqa;
  throw Error(ErrorCode::InvalidArgument, "dataset format '" + std::string(name) + "'");
}

std::vector<VqaItem> ingest_dataset(DatasetFormat format, std::string_view text,
                                    std::optional<Split> split) {
  std::vector<VqaItem> items;
  if (format == DatasetFormat::Normalized) {
    for (auto& it : parse_vqa_jsonl(text))
      if (!split || it.split == *split) items.push_back(std::move(it));
    return items;
  }
  if (format == DatasetFormat::PathVqa) {
    size_t index = 0;
    const Split label = split.value_or(Split::Test);
    for_each_line(text, [&](const ojson& j, size_t) {
      VqaItem it;
      it.qid = j.contains("qid") ? scalar_to_string(j.at("qid"))
                                 : to_string(label) + "-" + std::to_string(index);
      ++index;
      it.image = j.at("image").get<std::string>();
      it.question = j.at("question").get<std::string>();
      it.answer = scalar_to_string(j.at("answer"));
      if (j.contains("answer_type")) {
        it.answer_type = parse_answer_type(j.at("answer_type").get<std::string>());
      } else {
        const auto tokens = normalize(it.answer);
        const bool yes_no = tokens.size() == 1 && (tokens[0] == "yes" || tokens[0] == "no");
        it.answer_type = yes_no ? AnswerType::Closed : AnswerType::Open;
      }
      it.split = label;
      items.push_back(std::move(it));
    });
    check_items(items);
    return items;
  }

  ojson arr;
  try {
    arr = ojson::parse(text);
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  if (!arr.is_array()) throw Error(ErrorCode::MalformedRecord, "expected a JSON array");
  for (size_t i = 0; i < arr.size(); ++i) {
    const auto& j = arr[i];
    try {
      VqaItem it;
      if (format == DatasetFormat::Slake) {
        if (j.value("q_lang", std::string("en")) != "en") continue;
        it.qid = scalar_to_string(j.at("qid"));
        it.image = j.at("img_name").get<std::string>();
        it.split = split.value_or(Split::Test);
      } else {
        it.qid = scalar_to_string(j.at("qid"));
        it.image = j.at("image_name").get<std::string>();
        const std::string phrase = j.value("phrase_type", std::string());
        it.split = phrase.starts_with("test") ? Split::Test : Split::Train;
        if (split && it.split != *split) continue;
      }
      it.question = j.at("question").get<std::string>();
      it.answer = scalar_to_string(j.at("answer"));
      it.answer_type = parse_answer_type(j.at("answer_type").get<std::string>());
      items.push_back(std::move(it));
    } catch (const ojson::exception& e) {
      throw Error(ErrorCode::MalformedRecord, "record " + std::to_string(i) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(ErrorCode::MalformedRecord, "record " + std::to_string(i) + ": " + e.what());
    }
  }
  check_items(items);
  return items;
}

std::vector<VqaItem> ingest_dataset_file(DatasetFormat format, const std::filesystem::path& path,
                                         std::optional<Split> split) {
  const auto bytes = read_file_bytes(path);
  return ingest_dataset(format, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                        split);
}

}  // namespace medmm
