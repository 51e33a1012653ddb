#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "medmm/http.hpp"

namespace medmm {

struct CaptionSample {
  std::string id;
  std::string image_ref;
  std::string caption;
  std::vector<std::string> context_mentions;
};

// One object per line: {"id", "image", "caption", "context_mentions": [...]}.
// "image_ref" and "in_context_mentions" are accepted as aliases.
std::vector<CaptionSample> parse_captions_jsonl(std::string_view text);
std::vector<CaptionSample> load_captions_jsonl(const std::filesystem::path& path);

struct FewShot {
  std::string input;
  std::string output;
};

// JSON array of {"input": ..., "output": ...}.
std::vector<FewShot> load_fewshots(const std::filesystem::path& path);

struct Prompt {
  std::string system;
  std::string user;
};

// The generation instruction given to both providers.
extern const std::string_view kSystemPrompt;

Prompt build_prompt(const CaptionSample& s, const std::vector<FewShot>& fewshots);

enum class ProviderSlot { A, B };
std::string to_string(ProviderSlot slot);

struct MixPlan {
  double ratio_a = 0.25;
  uint64_t seed = 0;
};

// Exactly round_half_even(ratio_a * N) ids go to A, picked by a seeded
// Fisher-Yates permutation of the input order.
std::map<std::string, ProviderSlot> assign_providers(const std::vector<std::string>& ids,
                                                     const MixPlan& plan);
size_t provider_a_quota(size_t n, double ratio_a);

enum class ApiKind { MessagesApi, ChatCompletions };
ApiKind parse_api_kind(const std::string& name);
std::string to_string(ApiKind kind);

struct ProviderConfig {
  ApiKind kind = ApiKind::ChatCompletions;
  std::string base_url;
  std::string model;
  std::string auth_env_var;
  uint32_t max_attempts = 4;
  double timeout = 120.0;  // seconds
  uint32_t max_parallel = 4;
  double temperature = 0.7;
  uint32_t max_tokens = 1024;

  void validate(const std::string& label) const;
};

// Request body for the provider, keys in wire order.
std::string build_request_body(const ProviderConfig& cfg, const Prompt& prompt);
// Pulls the generated text out of a provider response; throws
// MalformedResponse when the expected path is absent.
std::string extract_response_text(ApiKind kind, const std::string& body);

struct RetryPolicy {
  double base_seconds = 1.0;
  double factor = 2.0;
};

struct CallHooks {
  // Environment lookup; defaults to std::getenv.
  std::function<std::optional<std::string>(const std::string&)> env;
  // Sleep for the given number of seconds; defaults to a real sleep.
  std::function<void(double)> sleep;
  uint64_t jitter_seed = 0;
};

struct CallStats {
  uint32_t attempts = 0;
  std::vector<double> backoffs;  // seconds actually slept, per retry
};

// Retries 429, 5xx and transport failures with full-jitter exponential
// backoff: before retry k (1-based) sleep uniform(0, base * factor^(k-1)).
std::string call_provider(const ProviderConfig& cfg, const Prompt& prompt, Transport& transport,
                          const CallHooks& hooks = {}, const RetryPolicy& retry = {},
                          CallStats* stats = nullptr);

enum class Role { Human, Assistant };

struct Turn {
  Role role;
  std::string text;
  bool operator==(const Turn&) const = default;
};

struct Conversation {
  std::vector<Turn> turns;
  bool operator==(const Conversation&) const = default;
};

// Line-oriented parse of "User:" / "Assistant:" transcripts (bold markdown
// role markers tolerated). A leading "<image>" placeholder on the first
// question is removed; to_instruct_json adds the canonical one back.
Conversation parse_conversation(std::string_view text);

struct ConversationEntry {
  std::string from;  // "human" or "gpt"
  std::string value;
  bool operator==(const ConversationEntry&) const = default;
};

struct InstructRecord {
  std::string id;
  std::string image;
  std::vector<ConversationEntry> conversations;
  // Any other keys of the source object (e.g. "domain"), re-emitted after
  // the three fixed ones.
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  bool operator==(const InstructRecord&) const = default;
};

inline constexpr std::string_view kImageToken = "<image>\n";

InstructRecord make_instruct_record(const CaptionSample& s, const Conversation& c);
std::string to_instruct_json(const std::vector<InstructRecord>& records);
std::string to_instruct_json(const std::vector<std::pair<CaptionSample, Conversation>>& items);

std::vector<InstructRecord> parse_instruct_json(std::string_view text);
std::vector<InstructRecord> load_instruct_json(const std::filesystem::path& path);

struct MergeResult {
  std::vector<InstructRecord> records;
  size_t count_a = 0;
  size_t count_b = 0;
};

MergeResult merge_instruct(const std::vector<InstructRecord>& a,
                           const std::vector<InstructRecord>& b);

struct SynthOptions {
  MixPlan mix;
  ProviderConfig provider_a;
  ProviderConfig provider_b;
  std::vector<FewShot> fewshots;
  RetryPolicy retry;
  // When false, the first failed sample aborts the run.
  bool skip_failures = false;
};

struct SynthFailure {
  std::string id;
  std::string error;
};

struct SynthResult {
  std::vector<InstructRecord> records;  // input order
  std::map<std::string, ProviderSlot> assignment;
  size_t generated_a = 0;
  size_t generated_b = 0;
  std::vector<SynthFailure> failures;
};

// Prompt -> provider call -> parse for every sample. Each provider runs up
// to max_parallel requests at once; records are committed in input order.
SynthResult synthesize(const std::vector<CaptionSample>& samples, const SynthOptions& opts,
                       Transport& transport_a, Transport& transport_b, const CallHooks& hooks = {});

// Canned provider used by `synthesize --mock`: answers both endpoints with a
// short fixed conversation that names the endpoint it came from.
HttpResponse canned_provider_response(const HttpRequest& request);

}  // namespace medmm
