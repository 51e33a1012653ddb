#include "medmm/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "medmm/error.hpp"
#include "medmm/eval.hpp"
#include "medmm/tensor_io.hpp"

namespace medmm {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

void reject_unknown(const ojson& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* x) { return k == x; }) == keys.end()) {
      throw Error(ErrorCode::InvalidConfig, "unknown config key '" + where + "." + k + "'");
    }
  }
}

template <typename T>
void read_opt(const ojson& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void merge_provider(const ojson& j, ProviderConfig& p, const std::string& where) {
  reject_unknown(j, {"kind", "base_url", "model", "auth_env_var", "max_attempts", "timeout", "max_parallel",
                     "temperature", "max_tokens"},
                 where);
  if (j.contains("kind")) p.kind = parse_api_kind(j.at("kind").get<std::string>());
  read_opt(j, "base_url", p.base_url);
  read_opt(j, "model", p.model);
  read_opt(j, "auth_env_var", p.auth_env_var);
  read_opt(j, "max_attempts", p.max_attempts);
  read_opt(j, "timeout", p.timeout);
  read_opt(j, "max_parallel", p.max_parallel);
  read_opt(j, "temperature", p.temperature);
  read_opt(j, "max_tokens", p.max_tokens);
}

ojson provider_json(const ProviderConfig& p) {
  ojson j;
  j["kind"] = to_string(p.kind);
  j["base_url"] = p.base_url;
  j["model"] = p.model;
  j["auth_env_var"] = p.auth_env_var;
  j["max_attempts"] = p.max_attempts;
  j["timeout"] = p.timeout;
  j["max_parallel"] = p.max_parallel;
  j["temperature"] = p.temperature;
  j["max_tokens"] = p.max_tokens;
  return j;
}

ImageF32 load_input_image(const fs::path& path) {
  if (path.extension() == ".mstf") return image_from_tensor(load_mstf(path));
  return to_float(load_image_rgb8(path));
}

ImageF32 square_input(const ImageF32& img, uint32_t base) {
  return img.height == img.width ? img : prepare_square(img, base);
}

std::string read_text(const fs::path& path) {
  const auto b = read_file_bytes(path);
  return std::string(b.begin(), b.end());
}

// Builds a directory under "<dir>.tmp" and renames it into place.
template <typename Fn>
void write_dir_atomic(const fs::path& dir, Fn&& fill) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    throw Error(ErrorCode::InvalidArgument, "output directory " + dir.string() + " already exists");
  }
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  if (fs::exists(dir)) fs::remove(dir);
  fs::rename(tmp, dir);
}

std::string shape_string(const std::vector<uint32_t>& dims) {
  std::string s;
  for (size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s;
}

int exit_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::IoError:
    case ErrorCode::HttpError:
    case ErrorCode::MalformedResponse:
      return exit_code::kRuntime;
    default:
      return exit_code::kValidation;
  }
}

struct CommonFlags {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<unsigned> threads;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "Seed override for every seeded component");
  sub->add_option("--threads", f.threads, "Worker threads for tile encoding");
}

RunConfig effective_config(const CommonFlags& f) {
  RunConfig cfg = RunConfig::defaults();
  if (!f.config.empty()) {
    ojson j;
    try {
      j = ojson::parse(read_text(f.config));
    } catch (const ojson::exception& e) {
      throw Error(ErrorCode::InvalidConfig, f.config + ": " + e.what());
    }
    cfg.merge_json(j);
  }
  if (f.seed) {
    cfg.encoder.seed = *f.seed;
    cfg.train.seed = *f.seed;
    cfg.mix.seed = *f.seed;
  }
  if (f.threads) cfg.threads = *f.threads;
  return cfg;
}

void print_effective(std::ostream& out, const RunConfig& cfg, const std::string& command, uint64_t seed) {
  out << "medmm " << kVersion << " " << command << "\n";
  out << "effective config: " << cfg.to_json().dump() << "\n";
  out << "seed: " << seed << "\n";
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.provider_a.kind = ApiKind::MessagesApi;
  cfg.provider_a.base_url = "https://api.anthropic.com";
  cfg.provider_a.model = "claude-3-opus-20240229";
  cfg.provider_a.auth_env_var = "PROVIDER_A_API_KEY";
  cfg.provider_b.kind = ApiKind::ChatCompletions;
  cfg.provider_b.base_url = "http://localhost:8000";
  cfg.provider_b.model = "meta-llama/Meta-Llama-3-70B-Instruct";
  cfg.provider_b.auth_env_var = "PROVIDER_B_API_KEY";
  return cfg;
}

void RunConfig::merge_json(const ojson& j) {
  try {
    reject_unknown(j, {"scale_set", "encoder", "train", "providers", "mix", "paths", "threads"}, "config");
    if (j.contains("scale_set")) {
      const auto& s = j.at("scale_set");
      reject_unknown(s, {"base", "scales"}, "scale_set");
      read_opt(s, "base", scale_set.base);
      read_opt(s, "scales", scale_set.scales);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      reject_unknown(e, {"kind", "patch", "dim", "seed"}, "encoder");
      if (e.contains("kind")) encoder.kind = parse_encoder_kind(e.at("kind").get<std::string>());
      read_opt(e, "patch", encoder.patch);
      read_opt(e, "dim", encoder.dim);
      read_opt(e, "seed", encoder.seed);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      reject_unknown(t, {"stage", "learning_rate", "global_batch", "epochs", "warmup_ratio", "weight_decay",
                         "seed", "hidden"},
                     "train");
      if (t.contains("stage")) {
        const uint64_t seed = train.seed;
        train = TrainConfig::for_stage(parse_stage(t.at("stage").get<std::string>()));
        train.seed = seed;
      }
      read_opt(t, "learning_rate", train.learning_rate);
      read_opt(t, "global_batch", train.global_batch);
      read_opt(t, "epochs", train.epochs);
      read_opt(t, "warmup_ratio", train.warmup_ratio);
      read_opt(t, "weight_decay", train.weight_decay);
      read_opt(t, "seed", train.seed);
      read_opt(t, "hidden", hidden);
    }
    if (j.contains("providers")) {
      const auto& p = j.at("providers");
      reject_unknown(p, {"A", "B"}, "providers");
      if (p.contains("A")) merge_provider(p.at("A"), provider_a, "providers.A");
      if (p.contains("B")) merge_provider(p.at("B"), provider_b, "providers.B");
    }
    if (j.contains("mix")) {
      const auto& m = j.at("mix");
      reject_unknown(m, {"ratio_a", "seed"}, "mix");
      read_opt(m, "ratio_a", mix.ratio_a);
      read_opt(m, "seed", mix.seed);
    }
    read_opt(j, "threads", threads);
    if (j.contains("paths")) {
      if (!j.at("paths").is_object()) throw Error(ErrorCode::InvalidConfig, "paths must be an object");
      for (const auto& [k, v] : j.at("paths").items()) paths[k] = v;
    }
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
}

ojson RunConfig::to_json() const {
  ojson j;
  j["scale_set"] = {{"base", scale_set.base}, {"scales", scale_set.scales}};
  j["encoder"] = {{"kind", to_string(encoder.kind)},
                  {"patch", encoder.patch},
                  {"dim", encoder.dim},
                  {"seed", encoder.seed}};
  j["train"] = {{"stage", to_string(train.stage)},
                {"learning_rate", train.learning_rate},
                {"global_batch", train.global_batch},
                {"epochs", train.epochs},
                {"warmup_ratio", train.warmup_ratio},
                {"weight_decay", train.weight_decay},
                {"seed", train.seed},
                {"hidden", hidden}};
  j["providers"] = {{"A", provider_json(provider_a)}, {"B", provider_json(provider_b)}};
  j["mix"] = {{"ratio_a", mix.ratio_a}, {"seed", mix.seed}};
  j["threads"] = threads;
  j["paths"] = paths;
  return j;
}

void RunConfig::validate() const {
  scale_set.validate();
  encoder.validate(scale_set.base);
  train.validate();
  if (hidden == 0) throw Error(ErrorCode::InvalidConfig, "train.hidden must be >= 1");
  provider_a.validate("providers.A");
  provider_b.validate("providers.B");
  provider_a_quota(0, mix.ratio_a);
  if (threads == 0) throw Error(ErrorCode::InvalidConfig, "threads must be >= 1");
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-scale biomedical vision-language toolkit", "medmm"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonFlags common;
  std::string image, out_path, out_dir;

  auto* tile = app.add_subcommand("tile", "Write pyramid tiles of an image plus a manifest");
  add_common(tile, common);
  tile->add_option("--image", image, "PNG, JPEG or [H,W,3] MSTF image")->required();
  tile->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* encode = app.add_subcommand("encode", "Encode an image into multi-scale features (MSTF)");
  add_common(encode, common);
  encode->add_option("--image", image, "PNG, JPEG or [H,W,3] MSTF image")->required();
  encode->add_option("--out", out_path, "Output .mstf file")->required();

  std::string features, targets, loss_csv, init_dir, stage_name, freeze;
  std::optional<double> lr;
  std::optional<uint32_t> batch, epochs, hidden;
  auto* train = app.add_subcommand("train-connector", "Train the MLP connector on features/targets");
  add_common(train, common);
  train->add_option("--features", features, "MSTF [N, ...] input features")->required();
  train->add_option("--targets", targets, "MSTF [N, m] target embeddings")->required();
  train->add_option("--out-dir", out_dir, "Checkpoint directory")->required();
  train->add_option("--loss-csv", loss_csv, "Loss trace CSV (step,lr,loss)");
  train->add_option("--init", init_dir, "Initial checkpoint directory");
  train->add_option("--stage", stage_name, "ConnectorPretrain | InstructFinetune");
  train->add_option("--lr", lr, "Peak learning rate");
  train->add_option("--batch", batch, "Global batch size");
  train->add_option("--epochs", epochs, "Epochs");
  train->add_option("--hidden", hidden, "Hidden width when initializing");
  train->add_option("--freeze", freeze, "Comma list of frozen groups: connector_in, connector_out, all");

  std::string in_path, fewshots;
  bool mock = false, skip_failures = false;
  std::optional<double> ratio_a;
  auto* synth = app.add_subcommand("synthesize", "Generate instruct JSON from caption JSONL");
  add_common(synth, common);
  synth->add_option("--in", in_path, "Caption JSONL")->required();
  synth->add_option("--out", out_path, "Instruct JSON output")->required();
  synth->add_option("--ratio-a", ratio_a, "Share of samples sent to provider A");
  synth->add_option("--fewshots", fewshots, "JSON array of {input, output} examples");
  synth->add_flag("--mock", mock, "Use the canned offline transport");
  synth->add_flag("--skip-failures", skip_failures, "Drop failed samples instead of aborting");

  std::string format = "auto", split_name;
  bool as_json = false;
  auto* stats = app.add_subcommand("stats", "Count instruct JSON domains or VQA dataset splits");
  add_common(stats, common);
  stats->add_option("--in", in_path, "Instruct JSON or dataset file")->required();
  stats->add_option("--format", format, "auto | instruct | normalized | vqa-rad | slake | pathvqa");
  stats->add_option("--split", split_name, "train | val | test");
  stats->add_flag("--json", as_json, "Print JSON instead of a table");

  std::string predictions, dataset, name = "dataset", out_json;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score predictions against a VQA dataset");
  add_common(evaluate_cmd, common);
  evaluate_cmd->add_option("--predictions", predictions, "JSONL of {qid, text}")->required();
  evaluate_cmd->add_option("--dataset", dataset, "Dataset file")->required();
  evaluate_cmd->add_option("--format", format, "normalized | vqa-rad | slake | pathvqa");
  evaluate_cmd->add_option("--split", split_name, "train | val | test");
  evaluate_cmd->add_option("--name", name, "Dataset label in the report");
  evaluate_cmd->add_option("--out-json", out_json, "Machine-readable report path");

  std::string file_a, file_b;
  auto* merge = app.add_subcommand("merge", "Concatenate two instruct JSON files");
  add_common(merge, common);
  merge->add_option("--a", file_a, "First instruct JSON")->required();
  merge->add_option("--b", file_b, "Second instruct JSON")->required();
  merge->add_option("--out", out_path, "Merged output")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_code::kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return exit_code::kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return exit_code::kUsage;
  }

  RunConfig cfg;
  try {
    cfg = effective_config(common);
    if (ratio_a) cfg.mix.ratio_a = *ratio_a;
    if (!stage_name.empty()) {
      const uint64_t seed = cfg.train.seed;
      cfg.train = TrainConfig::for_stage(parse_stage(stage_name));
      cfg.train.seed = seed;
    }
    if (lr) cfg.train.learning_rate = *lr;
    if (batch) cfg.train.global_batch = *batch;
    if (epochs) cfg.train.epochs = *epochs;
    if (hidden) cfg.hidden = *hidden;
    cfg.validate();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kValidation;
  }

  try {
    if (*tile) {
      print_effective(out, cfg, "tile", cfg.encoder.seed);
      const ImageF32 img = square_input(load_input_image(image), cfg.scale_set.base);
      const auto levels = build_pyramid(img, cfg.scale_set);
      size_t total = 0;
      write_dir_atomic(out_dir, [&](const fs::path& dir) {
        ojson manifest;
        manifest["base"] = cfg.scale_set.base;
        manifest["source"] = fs::path(image).filename().string();
        ojson scales = ojson::array();
        for (const auto& level : levels) {
          const TileGrid grid = split_tiles(level, cfg.scale_set.base);
          const std::string sub = "scale_" + std::to_string(level.height);
          fs::create_directories(dir / sub);
          ojson files = ojson::array();
          for (uint32_t i = 0; i < grid.rows; ++i) {
            for (uint32_t j = 0; j < grid.cols; ++j) {
              const std::string file = sub + "/tile_" + std::to_string(i) + "_" + std::to_string(j) + ".mstf";
              save_mstf(dir / file, to_tensor(grid.tiles[static_cast<size_t>(i) * grid.cols + j]));
              files.push_back(file);
            }
          }
          total += grid.tiles.size();
          scales.push_back({{"side", level.height}, {"rows", grid.rows}, {"cols", grid.cols}, {"tiles", files}});
        }
        manifest["scales"] = std::move(scales);
        write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
      });
      out << "wrote " << total << " tiles to " << out_dir << "\n";
    } else if (*encode) {
      print_effective(out, cfg, "encode", cfg.encoder.seed);
      const ImageF32 img = square_input(load_input_image(image), cfg.scale_set.base);
      const MultiScaleFeatures f = encode_multiscale(img, cfg.scale_set, cfg.encoder, cfg.threads);
      const TensorF32 t = to_tensor(f);
      save_mstf(out_path, t);
      out << "tiles encoded: " << f.tiles_encoded << "\n";
      out << "shape: " << shape_string(t.dims()) << "\n";
    } else if (*train) {
      print_effective(out, cfg, "train-connector", cfg.train.seed);
      const TensorF32 ft = load_mstf(features);
      const uint32_t rows = ft.dims()[0];
      const uint32_t cols = static_cast<uint32_t>(ft.size() / rows);
      const Mat<float> x = matrix_from_tensor(
          TensorF32({rows, cols}, std::vector<float>(ft.data().begin(), ft.data().end())));
      const Mat<float> y = matrix_from_tensor(load_mstf(targets));
      FreezeMask mask = FreezeMask::for_stage(cfg.train.stage);
      std::stringstream ss(freeze);
      for (std::string g; std::getline(ss, g, ',');) {
        if (g == "all") {
          mask = FreezeMask::all_frozen();
        } else if (g == "connector_in") {
          mask.connector_in = false;
        } else if (g == "connector_out") {
          mask.connector_out = false;
        } else if (!g.empty()) {
          throw Error(ErrorCode::InvalidArgument, "--freeze: unknown group '" + g + "'");
        }
      }
      const MlpParams<float> p0 = init_dir.empty()
                                      ? init_mlp(x.cols(), cfg.hidden, y.cols(), cfg.train.seed)
                                      : load_checkpoint(init_dir);
      const TrainResult r = train_stage(x, y, cfg.train, mask, p0);
      write_dir_atomic(out_dir, [&](const fs::path& dir) {
        save_checkpoint(dir, r.params, {cfg.train.seed, cfg.train.stage, r.total_steps});
      });
      if (!loss_csv.empty()) write_file_atomic(loss_csv, loss_trace_csv(r.trace));
      const double final_loss = alignment_loss(mlp_forward(x, r.params), y);
      out << "steps: " << r.total_steps << "\n";
      out << "final mean loss: " << final_loss << "\n";
    } else if (*synth) {
      print_effective(out, cfg, "synthesize", cfg.mix.seed);
      SynthOptions opts;
      opts.mix = cfg.mix;
      opts.provider_a = cfg.provider_a;
      opts.provider_b = cfg.provider_b;
      opts.skip_failures = skip_failures;
      if (!fewshots.empty()) opts.fewshots = load_fewshots(fewshots);
      const auto samples = load_captions_jsonl(in_path);
      SynthResult result;
      if (mock) {
        MockTransport ta(canned_provider_response), tb(canned_provider_response);
        CallHooks hooks;
        hooks.env = [](const std::string&) { return std::optional<std::string>("mock-key"); };
        hooks.sleep = [](double) {};
        result = synthesize(samples, opts, ta, tb, hooks);
      } else {
        for (const auto* p : {&cfg.provider_a, &cfg.provider_b}) {
          const char* v = std::getenv(p->auth_env_var.c_str());
          if (!v || !*v) {
            throw Error(ErrorCode::MissingCredential,
                        "environment variable '" + p->auth_env_var + "' is not set");
          }
        }
        HttplibTransport ta, tb;
        result = synthesize(samples, opts, ta, tb);
      }
      write_file_atomic(out_path, to_instruct_json(result.records));
      out << "records: " << result.records.size() << "\n";
      out << "provider A: " << result.generated_a << "\n";
      out << "provider B: " << result.generated_b << "\n";
      for (const auto& f : result.failures) err << "skipped " << f.id << ": " << f.error << "\n";
    } else if (*stats) {
      print_effective(out, cfg, "stats", cfg.mix.seed);
      const std::string text = read_text(in_path);
      std::string fmt = format;
      if (fmt == "auto") {
        const auto first = text.find_first_not_of(" \t\r\n");
        fmt = first != std::string::npos && text[first] == '[' ? "instruct" : "normalized";
      }
      const std::optional<Split> split =
          split_name.empty() ? std::nullopt : std::optional<Split>(parse_split(split_name));
      if (fmt == "instruct") {
        const auto s = instruct_stats(parse_instruct_json(text));
        if (as_json) {
          ojson j = ojson::object();
          for (const auto& [d, v] : s) j[d] = {{"images", v.images}, {"qas", v.qas}};
          out << j.dump(2) << "\n";
        } else {
          out << render_instruct_stats(s);
        }
      } else {
        const auto s = dataset_stats(ingest_dataset(parse_dataset_format(fmt), text, split));
        if (as_json) {
          ojson j = ojson::object();
          for (const auto& [sp, v] : s) {
            j[to_string(sp)] = {{"total", v.total}, {"open", v.open}, {"closed", v.closed}, {"images", v.images}};
          }
          out << j.dump(2) << "\n";
        } else {
          out << render_dataset_stats(s);
        }
      }
    } else if (*evaluate_cmd) {
      print_effective(out, cfg, "evaluate", cfg.mix.seed);
      const std::optional<Split> split =
          split_name.empty() ? std::nullopt : std::optional<Split>(parse_split(split_name));
      const DatasetFormat fmt = parse_dataset_format(format == "auto" ? "normalized" : format);
      // SLAKE and PathVQA files hold one split, so --split only labels them.
      const bool split_filters = fmt == DatasetFormat::Normalized || fmt == DatasetFormat::VqaRad;
      auto items = ingest_dataset_file(fmt, dataset, split_filters ? std::nullopt : split);
      auto preds = parse_predictions_jsonl(read_text(predictions));
      if (split && split_filters) {
        // Predictions for questions of other splits are not errors, just out of scope.
        std::set<std::string> other;
        for (const auto& it : items)
          if (it.split != *split) other.insert(it.qid);
        std::erase_if(items, [&](const VqaItem& it) { return it.split != *split; });
        std::erase_if(preds, [&](const Prediction& p) { return other.count(p.qid) > 0; });
      }
      const EvalReport report = evaluate(preds, items);
      if (!out_json.empty()) write_file_atomic(out_json, report_json(report, name));
      out << render_report(report, name);
    } else if (*merge) {
      print_effective(out, cfg, "merge", cfg.mix.seed);
      const MergeResult m = merge_instruct(load_instruct_json(file_a), load_instruct_json(file_b));
      write_file_atomic(out_path, to_instruct_json(m.records));
      out << "records: " << m.records.size() << " (a: " << m.count_a << ", b: " << m.count_b << ")\n";
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kRuntime;
  }
  return exit_code::kOk;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace medmm
