#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "medmm/connector.hpp"
#include "medmm/hier_encoder.hpp"
#include "medmm/image_pyramid.hpp"
#include "medmm/synth.hpp"

namespace medmm {

// Effective configuration of a CLI run: defaults, then the JSON config file,
// then command-line flags.
struct RunConfig {
  ScaleSet scale_set;
  EncoderSpec encoder;
  TrainConfig train;
  uint32_t hidden = 512;  // connector hidden width
  ProviderConfig provider_a;
  ProviderConfig provider_b;
  MixPlan mix;
  unsigned threads = 1;
  nlohmann::ordered_json paths = nlohmann::ordered_json::object();

  static RunConfig defaults();
  // Unknown keys are rejected so typos do not pass silently.
  void merge_json(const nlohmann::ordered_json& j);
  nlohmann::ordered_json to_json() const;
  void validate() const;
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kValidation = 2;
inline constexpr int kRuntime = 3;
}  // namespace exit_code

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace medmm
