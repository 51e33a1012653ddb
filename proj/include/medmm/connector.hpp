#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "medmm/tensor_io.hpp"

namespace medmm {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Two-layer projector y = GELU(x W1 + b1) W2 + b2.
template <typename T>
struct MlpParams {
  Mat<T> w1;      // D x h
  RowVec<T> b1;   // h
  Mat<T> w2;      // h x m
  RowVec<T> b2;   // m

  Eigen::Index in_dim() const { return w1.rows(); }
  Eigen::Index hidden() const { return w1.cols(); }
  Eigen::Index out_dim() const { return w2.cols(); }

  // Throws ShapeMismatch / InvalidArgument on inconsistent or non-finite
  // entries.
  void validate() const;

  template <typename U>
  MlpParams<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(),
            b2.template cast<U>()};
  }
};

// Weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)) from SplitMix64(seed),
// drawn W1 then W2, row-major; biases zero.
MlpParams<float> init_mlp(Eigen::Index in_dim, Eigen::Index hidden,
                          Eigen::Index out_dim, uint64_t seed);

// Exact Gaussian GELU, 0.5 z (1 + erf(z / sqrt 2)), and its derivative.
template <typename T>
T gelu(T z);
template <typename T>
T gelu_grad(T z);

template <typename T>
Mat<T> mlp_forward(const Mat<T>& x, const MlpParams<T>& p);

// Mean over rows of 1 - cos(pred_i, target_i). Range [0, 2].
template <typename T>
T alignment_loss(const Mat<T>& pred, const Mat<T>& target);

template <typename T>
struct LossAndGrads {
  T loss;
  MlpParams<T> grads;
};

template <typename T>
LossAndGrads<T> mlp_backward(const Mat<T>& x, const Mat<T>& target,
                             const MlpParams<T>& p);

enum class Stage { ConnectorPretrain, InstructFinetune };

Stage parse_stage(const std::string& name);
std::string to_string(Stage stage);

struct TrainConfig {
  Stage stage = Stage::ConnectorPretrain;
  double learning_rate = 1e-3;
  uint32_t global_batch = 256;
  uint32_t epochs = 1;
  double warmup_ratio = 0.03;
  double weight_decay = 0.0;
  uint64_t seed = 0;

  // Hyperparameter tables for each stage.
  static TrainConfig for_stage(Stage stage);
  void validate() const;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Parameter groups of the full model. Only the two connector layers carry
// weights in this library; the encoder and language model flags exist so the
// staged schedule is explicit and checkable.
struct FreezeMask {
  bool encoder = false;
  bool connector_in = true;   // W1, b1
  bool connector_out = true;  // W2, b2
  bool language_model = false;

  static FreezeMask for_stage(Stage stage);
  static FreezeMask all_frozen() { return {false, false, false, false}; }
};

// max(1, round(warmup_ratio * total_steps)).
uint64_t warmup_steps(uint64_t total_steps, const TrainConfig& cfg);

// Linear warmup lr*(step+1)/warmup, then half-cosine decay to 0 at
// total_steps.
double lr_at(uint64_t step, uint64_t total_steps, const TrainConfig& cfg);

struct StepLog {
  uint64_t step;
  double lr;
  double loss;
};

struct TrainResult {
  MlpParams<float> params;
  std::vector<StepLog> trace;
  uint64_t total_steps = 0;
};

// AdamW over seeded shuffled mini-batches. Rows of `targets` pair with rows
// of `inputs`. Frozen groups come back bit-identical to p0.
TrainResult train_stage(const Mat<float>& inputs, const Mat<float>& targets,
                        const TrainConfig& cfg, const FreezeMask& mask,
                        const MlpParams<float>& p0);

TensorF32 to_tensor(const Mat<float>& m);
TensorF32 to_tensor(const RowVec<float>& v);
Mat<float> matrix_from_tensor(const TensorF32& t);  // requires ndim 2

struct CheckpointInfo {
  uint64_t seed = 0;
  Stage stage = Stage::ConnectorPretrain;
  uint64_t step = 0;
};

// dir/{w1,b1,w2,b2}.mstf plus dir/manifest.json.
void save_checkpoint(const std::filesystem::path& dir,
                     const MlpParams<float>& p, const CheckpointInfo& info);
MlpParams<float> load_checkpoint(const std::filesystem::path& dir,
                                 CheckpointInfo* info = nullptr);

std::string loss_trace_csv(const std::vector<StepLog>& trace);

}  // namespace medmm
