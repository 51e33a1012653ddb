#include <algorithm>
#include <vector>

#include "doctest.h"
#include "medmm/eval.hpp"
#include "medmm/rng.hpp"
#include "support.hpp"

using namespace medmm;
using testing::fixture;
using testing::fixture_text;

namespace {

VqaItem item(std::string qid, std::string answer, AnswerType type, std::string image = "img") {
  return {std::move(qid), std::move(image), "q?", std::move(answer), type, Split::Test};
}

using Tokens = std::vector<std::string>;

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("normalization") {
  CHECK(normalize("Yes.") == Tokens{"yes"});
  CHECK(normalize("Left  lower-lobe") == Tokens{"left", "lower", "lobe"});
  CHECK(normalize("") == Tokens{});
  CHECK(normalize("  ...  ") == Tokens{});
  CHECK(normalize("T2-weighted MRI, 3cm") == Tokens{"t2", "weighted", "mri", "3cm"});
  for (const char* s : {"A b-C", "x\ty\nz", "Mixed CASE 42!"}) {
    std::string joined;
    for (const auto& t : normalize(s)) joined += (joined.empty() ? "" : " ") + t;
    CHECK(normalize(joined) == normalize(s));
  }
}

TEST_CASE("closed accuracy") {
  const std::vector<VqaItem> items = {item("1", "yes", AnswerType::Closed), item("2", "yes", AnswerType::Closed),
                                      item("3", "yes", AnswerType::Closed)};
  CHECK(closed_accuracy({{"1", "Yes"}, {"2", "no"}, {"3", "yes"}}, items) == 2.0 / 3.0);
  CHECK(closed_accuracy({{"1", "yes"}, {"2", "yes"}, {"3", "yes"}}, items) == 1.0);
  CHECK_MEDMM_ERROR(closed_accuracy({{"1", "yes"}}, items), ErrorCode::MissingPrediction);
  CHECK_MEDMM_ERROR(closed_accuracy({}, {item("o", "lung", AnswerType::Open)}), ErrorCode::EmptyClosedSet);
}

TEST_CASE("open recall") {
  CHECK(open_recall("the left lobe is affected", "left lower lobe") == 2.0 / 3.0);
  CHECK(open_recall("lower left lobe region", "left lower lobe") == 1.0);
  CHECK(open_recall("a mass", "mass mass lesion") == 0.5);
  CHECK(open_recall("", "lung") == 0.0);
  CHECK_MEDMM_ERROR(open_recall("anything", "?!"), ErrorCode::EmptyGroundTruth);
}

TEST_CASE("open recall is monotone in added prediction tokens") {
  SplitMix64 rng(5);
  const std::vector<std::string> vocab = {"left", "right", "lobe", "lower", "upper", "mass", "lung", "the"};
  for (int trial = 0; trial < 200; ++trial) {
    std::string answer, pred;
    for (uint64_t k = 0, n = 1 + rng.below(4); k < n; ++k) answer += vocab[rng.below(vocab.size())] + " ";
    for (uint64_t k = 0, n = rng.below(4); k < n; ++k) pred += vocab[rng.below(vocab.size())] + " ";
    const double before = open_recall(pred, answer);
    const double after = open_recall(pred + vocab[rng.below(vocab.size())], answer);
    CHECK(after >= before);
    CHECK(before >= 0.0);
    CHECK(after <= 1.0);
  }
}

TEST_CASE("four-item report matches hand scores") {
  const std::vector<VqaItem> items = {item("c1", "yes", AnswerType::Closed), item("c2", "no", AnswerType::Closed),
                                      item("o1", "left lower lobe", AnswerType::Open),
                                      item("o2", "mass", AnswerType::Open)};
  const std::vector<Prediction> preds = {
      {"o2", "a mass lesion"}, {"c1", "Yes."}, {"o1", "the left lobe is affected"}, {"c2", "yes"}};
  const EvalReport r = evaluate(preds, items);
  CHECK(r.n_closed == 2);
  CHECK(r.n_open == 2);
  CHECK(*r.closed_accuracy == 0.5);
  CHECK(*r.open_recall == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(*r.average() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  REQUIRE(r.per_item.size() == 4);
  CHECK(r.per_item[0] == std::pair<std::string, double>{"c1", 1.0});
  CHECK(r.per_item[1].second == 0.0);
  CHECK(r.per_item[2].second == 2.0 / 3.0);
  CHECK(r.per_item[3].second == 1.0);
  const std::string table = render_report(r, "Fixture");
  CHECK(table.find("0.8333") != std::string::npos);
  CHECK(table.find("0.5000") != std::string::npos);
  CHECK(table.find("0.6667") != std::string::npos);
}

TEST_CASE("perfect predictions and absent columns") {
  const std::vector<VqaItem> items = {item("a", "yes", AnswerType::Closed), item("b", "right kidney", AnswerType::Open)};
  const EvalReport perfect = evaluate({{"a", "yes"}, {"b", "right kidney"}}, items);
  CHECK(*perfect.open_recall == 1.0);
  CHECK(*perfect.closed_accuracy == 1.0);
  CHECK(*perfect.average() == 1.0);

  const EvalReport open_only = evaluate({{"b", "kidney"}}, {items[1]});
  CHECK_FALSE(open_only.closed_accuracy.has_value());
  CHECK(*open_only.average() == 0.5);
  const std::string table = render_report(open_only, "PathVQA");
  const auto data_line = table.substr(table.find('\n') + 1);
  CHECK(data_line.find(" / ") != std::string::npos);
  CHECK(report_json(open_only, "PathVQA").find("\"closed_accuracy\": null") != std::string::npos);
}

TEST_CASE("evaluate rejects inconsistent predictions") {
  const std::vector<VqaItem> items = {item("a", "yes", AnswerType::Closed)};
  CHECK_MEDMM_ERROR(evaluate({}, items), ErrorCode::MissingPrediction);
  CHECK_THROWS_AS(evaluate({{"a", "yes"}, {"a", "no"}}, items), Error);
  CHECK_THROWS_AS(evaluate({{"a", "yes"}, {"zz", "no"}}, items), Error);
}

TEST_CASE("aggregates do not depend on item order and are idempotent") {
  SplitMix64 rng(10);
  const std::vector<std::string> vocab = {"yes", "no", "left", "lobe", "mass", "lung", "ct", "mri"};
  std::vector<VqaItem> items;
  std::vector<Prediction> preds;
  for (int i = 0; i < 10000; ++i) {
    const bool closed = rng.below(2) == 0;
    std::string answer = closed ? vocab[rng.below(2)] : vocab[2 + rng.below(6)] + " " + vocab[2 + rng.below(6)];
    std::string pred = closed ? vocab[rng.below(2)] : vocab[2 + rng.below(6)];
    items.push_back(item("q" + std::to_string(i), answer, closed ? AnswerType::Closed : AnswerType::Open));
    preds.push_back({"q" + std::to_string(i), pred});
  }
  const EvalReport base = evaluate(preds, items);
  CHECK(evaluate(preds, items).open_recall == base.open_recall);
  for (int shuffle = 0; shuffle < 3; ++shuffle) {
    seeded_shuffle(std::span(items), rng);
    seeded_shuffle(std::span(preds), rng);
    const EvalReport r = evaluate(preds, items);
    CHECK(r.open_recall == base.open_recall);
    CHECK(r.closed_accuracy == base.closed_accuracy);
    CHECK(r.average() == base.average());
  }
}

TEST_CASE("dataset statistics of the hand-counted fixture") {
  const auto items = parse_vqa_jsonl(fixture_text("vqa_10.jsonl"));
  REQUIRE(items.size() == 10);
  const auto stats = dataset_stats(items);
  CHECK(stats.at(Split::Train) == SplitStats{4, 2, 2, 3});
  CHECK(stats.at(Split::Test) == SplitStats{5, 2, 3, 4});
  CHECK(stats.at(Split::Val) == SplitStats{1, 1, 0, 1});
  CHECK(parse_vqa_jsonl(to_vqa_jsonl(items)) == items);
  const std::string table = render_dataset_stats(stats);
  CHECK(table.find("test") != std::string::npos);
}

TEST_CASE("source dataset ingestion") {
  SUBCASE("SLAKE keeps English rows") {
    const auto items = ingest_dataset_file(DatasetFormat::Slake, fixture("slake_mini.json"));
    CHECK(dataset_stats(items).at(Split::Test) == SplitStats{3, 1, 2, 2});
    CHECK(items[0].qid == "11");
    CHECK(items[0].image == "xmlab1/source.jpg");
  }
  SUBCASE("VQA-RAD splits on phrase type") {
    const auto all = ingest_dataset_file(DatasetFormat::VqaRad, fixture("vqarad_mini.json"));
    const auto stats = dataset_stats(all);
    CHECK(stats.at(Split::Test) == SplitStats{3, 2, 1, 3});
    CHECK(stats.at(Split::Train) == SplitStats{1, 0, 1, 1});
    const auto test = ingest_dataset_file(DatasetFormat::VqaRad, fixture("vqarad_mini.json"), Split::Test);
    CHECK(test.size() == 3);
    CHECK(test.back().answer == "2");
  }
  SUBCASE("PathVQA infers closed questions from yes/no answers") {
    const auto items = ingest_dataset_file(DatasetFormat::PathVqa, fixture("pathvqa_mini.jsonl"));
    CHECK(dataset_stats(items).at(Split::Test) == SplitStats{3, 1, 2, 2});
  }
  SUBCASE("format names") {
    CHECK(parse_dataset_format("slake") == DatasetFormat::Slake);
    CHECK(parse_dataset_format("vqa-rad") == DatasetFormat::VqaRad);
    CHECK_THROWS_AS(parse_dataset_format("imagenet"), Error);
  }
}

TEST_CASE("instruct statistics") {
  const auto a = load_instruct_json(fixture("instruct_a.json"));
  const auto b = load_instruct_json(fixture("instruct_b.json"));
  CHECK(record_domain(a[0]) == "CT");
  CHECK(record_domain(a[2]) == "MRI");
  CHECK(record_domain(b[1]) == "Chest X-Ray");
  const auto merged = merge_instruct(a, b).records;
  const auto stats = instruct_stats(merged);
  CHECK(stats.at("CT") == DomainStats{2, 7});
  CHECK(stats.at("MRI") == DomainStats{1, 1});
  CHECK(stats.at("Chest X-Ray") == DomainStats{1, 1});
  CHECK(instruct_stats({}).empty());

  InstructRecord one;
  one.id = "r";
  one.image = "i.jpg";
  for (int k = 0; k < 3; ++k) {
    one.conversations.push_back({"human", "q"});
    one.conversations.push_back({"gpt", "a"});
  }
  CHECK(instruct_stats({one}).at("Unlabeled") == DomainStats{1, 3});
  CHECK(render_instruct_stats(stats).find("Chest X-Ray") != std::string::npos);
}

TEST_CASE("answer type and split parsing") {
  CHECK(parse_answer_type(" closed ") == AnswerType::Closed);
  CHECK(parse_answer_type("OPEN") == AnswerType::Open);
  CHECK(parse_split("validate") == Split::Val);
  CHECK(parse_split("Test") == Split::Test);
  CHECK_THROWS_AS(parse_split("dev"), Error);
  CHECK_THROWS_AS(parse_vqa_jsonl(R"({"qid":"1","image":"i","question":"q","answer":"","answer_type":"OPEN","split":"test"})"),
                  Error);
}

}  // TEST_SUITE
