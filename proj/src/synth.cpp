#include "medmm/synth.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <thread>

#include "medmm/error.hpp"
#include "medmm/rng.hpp"
#include "medmm/tensor_io.hpp"

namespace medmm {

using ojson = nlohmann::ordered_json;

const std::string_view kSystemPrompt =
    "You are an AI assistant specialized in biomedical topics.\n"
    "\n"
    "You are provided with a text description (Figure Caption) of a figure image from a "
    "biomedical research paper. In some cases, you may have additional text (Figure Context) "
    "that mentions the image. Unfortunately, you don’t have access to the actual image.\n"
    "\n"
    "Your task is to generate questions and answers about the visual aspects of the image "
    "based on the provided description, which adhering to the following guidelines:\n"
    "\n"
    "- Focus on the visual aspects of the image that can be inferred without referring to "
    "specific facts, terms, abbreviations, dates, numbers, or names.\n"
    "\n"
    "- Avoid using phrases like \"mentioned\", \"caption\", or \"context\". Refer to the "
    "information as being \"in the image\".\n"
    "\n"
    "- Ensure questions are diverse and cover a range of visual aspects of the image.\n"
    "\n"
    "- Include at least 2-3 turns of questions and answers about the visual aspects of the "
    "image.\n"
    "\n"
    "- Answer responsibly, avoiding overconfidence, and do not provide medical advice or "
    "diagnostic information. Encourage the user to consult a healthcare professional for "
    "advice.\n"
    "\n"
    "Now, generate sample conversations based on these guidelines.";

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string json_to_id(const ojson& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  throw std::invalid_argument("id must be a string or integer");
}

std::string dump_json(const ojson& j, int indent) {
  return j.dump(indent, ' ', false, ojson::error_handler_t::replace);
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

// Ensures the first human turn begins with the image token, dropping any
// token that appeared elsewhere in that turn.
void canonicalize_image_token(InstructRecord& r) {
  if (r.conversations.empty()) {
    throw Error(ErrorCode::MalformedRecord, "record '" + r.id + "' has no conversation turns");
  }
  auto& first = r.conversations.front();
  if (first.from != "human") {
    throw Error(ErrorCode::MalformedRecord,
                "record '" + r.id + "' must start with a human turn, got '" + first.from + "'");
  }
  if (first.value.starts_with(kImageToken)) return;
  std::string v = first.value;
  for (auto pos = v.find("<image>"); pos != std::string::npos; pos = v.find("<image>")) {
    size_t len = 7;
    if (pos + len < v.size() && v[pos + len] == '\n') ++len;
    v.erase(pos, len);
  }
  first.value = std::string(kImageToken) + trim(v);
}

struct RoleMatch {
  Role role;
  std::string_view rest;
};

std::optional<RoleMatch> match_role(std::string_view line) {
  const auto start = line.find_first_not_of(" \t");
  if (start == std::string_view::npos) return std::nullopt;
  line.remove_prefix(start);
  static constexpr std::pair<std::string_view, Role> kPrefixes[] = {
      {"**User**:", Role::Human},           {"**User:**", Role::Human},
      {"User:", Role::Human},               {"**Assistant**:", Role::Assistant},
      {"**Assistant:**", Role::Assistant},  {"Assistant:", Role::Assistant},
  };
  for (const auto& [prefix, role] : kPrefixes) {
    if (line.starts_with(prefix)) return RoleMatch{role, line.substr(prefix.size())};
  }
  return std::nullopt;
}

std::string strip_image_placeholder(const std::string& text) {
  std::string_view v = text;
  if (!v.starts_with("<image>")) return text;
  v.remove_prefix(7);
  if (v.starts_with("\\n")) {
    v.remove_prefix(2);
  } else if (v.starts_with("\n")) {
    v.remove_prefix(1);
  }
  return trim(v);
}

}  // namespace

std::vector<CaptionSample> parse_captions_jsonl(std::string_view text) {
  std::vector<CaptionSample> out;
  std::set<std::string> seen;
  size_t line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = ojson::parse(line);
      CaptionSample s;
      s.id = json_to_id(j.at("id"));
      s.image_ref = j.contains("image") ? j.at("image").get<std::string>()
                                        : j.value("image_ref", std::string());
      s.caption = j.at("caption").get<std::string>();
      const char* key = j.contains("context_mentions") ? "context_mentions" : "in_context_mentions";
      if (j.contains(key)) s.context_mentions = j.at(key).get<std::vector<std::string>>();
      if (!seen.insert(s.id).second) {
        throw Error(ErrorCode::DuplicateIds, "caption id '" + s.id + "' repeats at line " +
                                                 std::to_string(line_no));
      }
      out.push_back(std::move(s));
    } catch (const ojson::exception& e) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<CaptionSample> load_captions_jsonl(const std::filesystem::path& path) {
  return parse_captions_jsonl(read_text(path));
}

std::vector<FewShot> load_fewshots(const std::filesystem::path& path) {
  try {
    const auto j = ojson::parse(read_text(path));
    std::vector<FewShot> out;
    for (const auto& item : j) {
      out.push_back({item.at("input").get<std::string>(), item.at("output").get<std::string>()});
    }
    return out;
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

Prompt build_prompt(const CaptionSample& s, const std::vector<FewShot>& fewshots) {
  if (trim(s.caption).empty()) {
    throw Error(ErrorCode::EmptyCaption, "sample '" + s.id + "' has an empty caption");
  }
  std::vector<std::string> sections;
  for (const auto& shot : fewshots) sections.push_back(shot.input + "\n\n" + shot.output);
  sections.push_back("Figure Caption: " + s.caption);
  for (size_t k = 0; k < s.context_mentions.size(); ++k) {
    sections.push_back("In Context Mentioning #" + std::to_string(k + 1) + ": " +
                       s.context_mentions[k]);
  }
  std::string user;
  for (size_t i = 0; i < sections.size(); ++i) {
    if (i) user += "\n\n";
    user += sections[i];
  }
  return {std::string(kSystemPrompt), user};
}

std::string to_string(ProviderSlot slot) { return slot == ProviderSlot::A ? "A" : "B"; }

size_t provider_a_quota(size_t n, double ratio_a) {
  if (!(ratio_a >= 0.0 && ratio_a <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "mix.ratio_a must be in [0, 1]");
  }
  // nearbyint uses the current rounding mode: round half to even by default.
  return static_cast<size_t>(std::nearbyint(ratio_a * static_cast<double>(n)));
}

std::map<std::string, ProviderSlot> assign_providers(const std::vector<std::string>& ids,
                                                     const MixPlan& plan) {
  const size_t quota = provider_a_quota(ids.size(), plan.ratio_a);
  std::set<std::string> unique;
  std::vector<std::string> dups;
  for (const auto& id : ids)
    if (!unique.insert(id).second) dups.push_back(id);
  if (!dups.empty()) {
    std::string msg = "duplicate ids:";
    for (const auto& d : dups) msg += " '" + d + "'";
    throw Error(ErrorCode::DuplicateIds, msg);
  }
  std::vector<size_t> order(ids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  SplitMix64 rng(plan.seed);
  seeded_shuffle(std::span(order), rng);
  std::map<std::string, ProviderSlot> out;
  for (size_t k = 0; k < order.size(); ++k) {
    out[ids[order[k]]] = k < quota ? ProviderSlot::A : ProviderSlot::B;
  }
  return out;
}

ApiKind parse_api_kind(const std::string& name) {
  if (name == "MessagesApi") return ApiKind::MessagesApi;
  if (name == "ChatCompletions") return ApiKind::ChatCompletions;
  throw Error(ErrorCode::InvalidArgument, "provider kind: unknown value '" + name + "'");
}

std::string to_string(ApiKind kind) {
  return kind == ApiKind::MessagesApi ? "MessagesApi" : "ChatCompletions";
}

void ProviderConfig::validate(const std::string& label) const {
  if (max_attempts < 1) throw Error(ErrorCode::InvalidConfig, label + ".max_attempts must be >= 1");
  if (max_parallel < 1) throw Error(ErrorCode::InvalidConfig, label + ".max_parallel must be >= 1");
  if (!(timeout > 0.0)) throw Error(ErrorCode::InvalidConfig, label + ".timeout must be > 0");
  if (base_url.empty()) throw Error(ErrorCode::InvalidConfig, label + ".base_url is empty");
  if (model.empty()) throw Error(ErrorCode::InvalidConfig, label + ".model is empty");
}

std::string build_request_body(const ProviderConfig& cfg, const Prompt& prompt) {
  ojson body;
  body["model"] = cfg.model;
  if (cfg.kind == ApiKind::MessagesApi) {
    body["max_tokens"] = cfg.max_tokens;
    body["system"] = prompt.system;
    body["messages"] = ojson::array({{{"role", "user"}, {"content", prompt.user}}});
  } else {
    body["messages"] = ojson::array({{{"role", "system"}, {"content", prompt.system}},
                                     {{"role", "user"}, {"content", prompt.user}}});
  }
  body["temperature"] = cfg.temperature;
  return dump_json(body, -1);
}

std::string extract_response_text(ApiKind kind, const std::string& body) {
  const char* path = kind == ApiKind::MessagesApi ? "content[0].text"
                                                  : "choices[0].message.content";
  try {
    const auto j = ojson::parse(body);
    const ojson& node = kind == ApiKind::MessagesApi
                            ? j.at("content").at(0).at("text")
                            : j.at("choices").at(0).at("message").at("content");
    return node.get<std::string>();
  } catch (const ojson::exception&) {
    throw Error(ErrorCode::MalformedResponse, std::string("response lacks ") + path);
  }
}

std::string call_provider(const ProviderConfig& cfg, const Prompt& prompt, Transport& transport,
                          const CallHooks& hooks, const RetryPolicy& retry, CallStats* stats) {
  cfg.validate("provider");
  std::optional<std::string> key;
  if (hooks.env) {
    key = hooks.env(cfg.auth_env_var);
  } else if (const char* v = std::getenv(cfg.auth_env_var.c_str())) {
    key = v;
  }
  if (cfg.auth_env_var.empty() || !key || key->empty()) {
    throw Error(ErrorCode::MissingCredential,
                "environment variable '" + cfg.auth_env_var + "' is not set");
  }

  std::string base = cfg.base_url;
  while (!base.empty() && base.back() == '/') base.pop_back();
  HttpRequest req;
  req.timeout_seconds = cfg.timeout;
  req.body = build_request_body(cfg, prompt);
  req.headers.emplace_back("content-type", "application/json");
  if (cfg.kind == ApiKind::MessagesApi) {
    req.url = base + "/v1/messages";
    req.headers.emplace_back("x-api-key", *key);
    req.headers.emplace_back("anthropic-version", "2023-06-01");
  } else {
    req.url = base + "/v1/chat/completions";
    req.headers.emplace_back("Authorization", "Bearer " + *key);
  }

  SplitMix64 jitter(hooks.jitter_seed);
  CallStats local;
  CallStats& st = stats ? *stats : local;
  for (uint32_t attempt = 1;; ++attempt) {
    const HttpResponse resp = transport.post(req);
    st.attempts = attempt;
    if (resp.status >= 200 && resp.status < 300) return extract_response_text(cfg.kind, resp.body);
    const bool retryable = resp.status == 0 || resp.status == 429 || resp.status >= 500;
    if (!retryable || attempt >= cfg.max_attempts) {
      std::string detail = resp.status == 0 ? "transport error: " + resp.error
                                            : "status " + std::to_string(resp.status) + ": " +
                                                  resp.body.substr(0, 200);
      throw Error(ErrorCode::HttpError, req.url + " failed after " + std::to_string(attempt) +
                                            " attempt(s), " + detail);
    }
    const double cap = retry.base_seconds * std::pow(retry.factor, attempt - 1);
    const double delay = jitter.uniform(0.0, cap);
    st.backoffs.push_back(delay);
    if (hooks.sleep) {
      hooks.sleep(delay);
    } else {
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
  }
}

Conversation parse_conversation(std::string_view text) {
  Conversation conv;
  bool in_turn = false;
  size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (auto m = match_role(line)) {
      conv.turns.push_back({m->role, std::string(m->rest)});
      in_turn = true;
    } else if (in_turn) {
      conv.turns.back().text += '\n';
      conv.turns.back().text += line;
    }
  }
  if (conv.turns.empty()) throw Error(ErrorCode::NoTurnsFound, "no User:/Assistant: lines");
  for (auto& t : conv.turns) t.text = trim(t.text);
  if (conv.turns.front().role != Role::Human) {
    throw Error(ErrorCode::DanglingAssistant, "conversation starts with an Assistant turn");
  }
  for (size_t i = 1; i < conv.turns.size(); ++i) {
    if (conv.turns[i].role == conv.turns[i - 1].role) {
      throw Error(ErrorCode::RoleOrderViolation,
                  "turns " + std::to_string(i) + " and " + std::to_string(i + 1) + " are both " +
                      (conv.turns[i].role == Role::Human ? "User" : "Assistant"));
    }
  }
  if (conv.turns.size() < 2) {
    throw Error(ErrorCode::RoleOrderViolation, "a conversation needs at least one answered question");
  }
  conv.turns.front().text = strip_image_placeholder(conv.turns.front().text);
  return conv;
}

InstructRecord make_instruct_record(const CaptionSample& s, const Conversation& c) {
  InstructRecord r;
  r.id = s.id;
  r.image = s.image_ref;
  for (const auto& t : c.turns) {
    r.conversations.push_back({t.role == Role::Human ? "human" : "gpt", t.text});
  }
  canonicalize_image_token(r);
  return r;
}

std::string to_instruct_json(const std::vector<InstructRecord>& records) {
  ojson arr = ojson::array();
  for (InstructRecord r : records) {
    canonicalize_image_token(r);
    ojson obj;
    obj["id"] = r.id;
    obj["image"] = r.image;
    ojson conv = ojson::array();
    for (const auto& e : r.conversations) conv.push_back({{"from", e.from}, {"value", e.value}});
    obj["conversations"] = std::move(conv);
    for (const auto& [k, v] : r.extra.items()) obj[k] = v;
    arr.push_back(std::move(obj));
  }
  return dump_json(arr, 2) + "\n";
}

std::string to_instruct_json(const std::vector<std::pair<CaptionSample, Conversation>>& items) {
  std::vector<InstructRecord> records;
  records.reserve(items.size());
  for (const auto& [s, c] : items) records.push_back(make_instruct_record(s, c));
  return to_instruct_json(records);
}

std::vector<InstructRecord> parse_instruct_json(std::string_view text) {
  ojson arr;
  try {
    arr = ojson::parse(text);
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("instruct JSON: ") + e.what());
  }
  if (!arr.is_array()) throw Error(ErrorCode::MalformedRecord, "instruct JSON must be an array");
  std::vector<InstructRecord> out;
  out.reserve(arr.size());
  for (size_t i = 0; i < arr.size(); ++i) {
    const auto& obj = arr[i];
    try {
      if (!obj.is_object()) throw std::invalid_argument("not an object");
      InstructRecord r;
      r.id = json_to_id(obj.at("id"));
      r.image = obj.at("image").get<std::string>();
      for (const auto& e : obj.at("conversations")) {
        const std::string from = e.at("from").get<std::string>();
        if (from != "human" && from != "gpt") {
          throw std::invalid_argument("conversation role '" + from + "'");
        }
        r.conversations.push_back({from, e.at("value").get<std::string>()});
      }
      for (const auto& [k, v] : obj.items()) {
        if (k != "id" && k != "image" && k != "conversations") r.extra[k] = v;
      }
      out.push_back(std::move(r));
    } catch (const ojson::exception& e) {
      throw Error(ErrorCode::MalformedRecord, "record " + std::to_string(i) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(ErrorCode::MalformedRecord, "record " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::vector<InstructRecord> load_instruct_json(const std::filesystem::path& path) {
  try {
    return parse_instruct_json(read_text(path));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::MalformedRecord) throw;
    throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

MergeResult merge_instruct(const std::vector<InstructRecord>& a,
                           const std::vector<InstructRecord>& b) {
  std::set<std::string> seen;
  std::vector<std::string> dups;
  for (const auto* src : {&a, &b})
    for (const auto& r : *src)
      if (!seen.insert(r.id).second) dups.push_back(r.id);
  if (!dups.empty()) {
    std::string msg = "duplicate ids:";
    for (const auto& d : dups) msg += " '" + d + "'";
    throw Error(ErrorCode::DuplicateIds, msg);
  }
  MergeResult out;
  out.records.reserve(a.size() + b.size());
  out.records.insert(out.records.end(), a.begin(), a.end());
  out.records.insert(out.records.end(), b.begin(), b.end());
  out.count_a = a.size();
  out.count_b = b.size();
  return out;
}

SynthResult synthesize(const std::vector<CaptionSample>& samples, const SynthOptions& opts,
                       Transport& transport_a, Transport& transport_b, const CallHooks& hooks) {
  opts.provider_a.validate("providers.A");
  opts.provider_b.validate("providers.B");
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.id);

  SynthResult result;
  result.assignment = assign_providers(ids, opts.mix);

  std::vector<size_t> queue_a, queue_b;
  for (size_t i = 0; i < samples.size(); ++i) {
    (result.assignment.at(samples[i].id) == ProviderSlot::A ? queue_a : queue_b).push_back(i);
  }

  std::vector<std::optional<InstructRecord>> done(samples.size());
  std::vector<std::exception_ptr> errors(samples.size());

  auto work = [&](size_t i, const ProviderConfig& cfg, Transport& transport) {
    try {
      CallHooks h = hooks;
      h.jitter_seed = opts.mix.seed ^ (0x9E3779B97F4A7C15ULL * (i + 1));
      const Prompt prompt = build_prompt(samples[i], opts.fewshots);
      const std::string text = call_provider(cfg, prompt, transport, h, opts.retry);
      done[i] = make_instruct_record(samples[i], parse_conversation(text));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  {
    std::vector<std::jthread> pool;
    std::atomic<size_t> next_a{0}, next_b{0};
    auto spawn = [&](const std::vector<size_t>& queue, std::atomic<size_t>& next,
                     const ProviderConfig& cfg, Transport& transport) {
      const size_t n = std::min<size_t>(cfg.max_parallel, queue.size());
      for (size_t w = 0; w < n; ++w) {
        pool.emplace_back([&] {
          for (size_t k = next++; k < queue.size(); k = next++) work(queue[k], cfg, transport);
        });
      }
    };
    spawn(queue_a, next_a, opts.provider_a, transport_a);
    spawn(queue_b, next_b, opts.provider_b, transport_b);
  }

  for (size_t i = 0; i < samples.size(); ++i) {
    if (errors[i]) {
      if (!opts.skip_failures) std::rethrow_exception(errors[i]);
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        result.failures.push_back({samples[i].id, e.what()});
      }
      continue;
    }
    if (result.assignment.at(samples[i].id) == ProviderSlot::A) {
      ++result.generated_a;
    } else {
      ++result.generated_b;
    }
    result.records.push_back(std::move(*done[i]));
  }
  return result;
}

HttpResponse canned_provider_response(const HttpRequest& request) {
  const bool messages = request.url.ends_with("/v1/messages");
  const std::string endpoint = messages ? "messages" : "chat-completions";
  const std::string text =
      "User: <image>\\nWhat type of image is this?\n"
      "Assistant: The image appears to be a biomedical figure. (canned reply from the " +
      endpoint +
      " endpoint)\n"
      "User: What stands out in the image?\n"
      "Assistant: The most prominent region is near the center of the image. Please consult a "
      "healthcare professional for an interpretation.";
  ojson body;
  if (messages) {
    body["content"] = ojson::array({{{"type", "text"}, {"text", text}}});
  } else {
    body["choices"] =
        ojson::array({{{"message", {{"role", "assistant"}, {"content", text}}}}});
  }
  return {200, body.dump(), ""};
}

}  // namespace medmm
