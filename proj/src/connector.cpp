#include "medmm/connector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <span>

#include "json.hpp"

#include "medmm/error.hpp"
#include "medmm/rng.hpp"

namespace medmm {
namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
struct AdamState {
  MlpParams<T> m;
  MlpParams<T> v;
};

template <typename T>
MlpParams<T> zeros_like(const MlpParams<T>& p) {
  return {Mat<T>::Zero(p.w1.rows(), p.w1.cols()), RowVec<T>::Zero(p.b1.size()),
          Mat<T>::Zero(p.w2.rows(), p.w2.cols()), RowVec<T>::Zero(p.b2.size())};
}

// Decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
template <typename Derived>
void adamw_step(Eigen::MatrixBase<Derived>& theta, const Eigen::MatrixBase<Derived>& grad,
                Eigen::MatrixBase<Derived>& m, Eigen::MatrixBase<Derived>& v, double lr,
                double weight_decay, uint64_t t) {
  using T = typename Derived::Scalar;
  const T b1 = static_cast<T>(kAdamBeta1);
  const T b2 = static_cast<T>(kAdamBeta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(kAdamBeta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(kAdamBeta2, static_cast<double>(t)));
  const T lr_t = static_cast<T>(lr);
  const T wd = static_cast<T>(weight_decay);
  const T eps = static_cast<T>(kAdamEps);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const T g = grad.derived().data()[i];
    T& mi = m.derived().data()[i];
    T& vi = v.derived().data()[i];
    T& th = theta.derived().data()[i];
    mi = b1 * mi + (T(1) - b1) * g;
    vi = b2 * vi + (T(1) - b2) * g * g;
    const T mhat = mi / bc1;
    const T vhat = vi / bc2;
    T update = mhat / (std::sqrt(vhat) + eps);
    if (wd != T(0)) update += wd * th;
    th -= lr_t * update;
  }
}

template <typename T>
void check_forward_shapes(const Mat<T>& x, const MlpParams<T>& p) {
  p.validate();
  if (x.cols() != p.in_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "input is " + shape_str(x.rows(), x.cols()) +
                                              ", W1 expects " + std::to_string(p.in_dim()) +
                                              " columns");
  }
}

}  // namespace

template <typename T>
void MlpParams<T>::validate() const {
  if (b1.size() != w1.cols() || w2.rows() != w1.cols() || b2.size() != w2.cols()) {
    throw Error(ErrorCode::ShapeMismatch,
                "inconsistent params: W1 " + shape_str(w1.rows(), w1.cols()) + ", b1 " +
                    std::to_string(b1.size()) + ", W2 " + shape_str(w2.rows(), w2.cols()) +
                    ", b2 " + std::to_string(b2.size()));
  }
  if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !b2.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "params contain non-finite entries");
  }
}

MlpParams<float> init_mlp(Eigen::Index in_dim, Eigen::Index hidden, Eigen::Index out_dim,
                          uint64_t seed) {
  if (in_dim < 1 || hidden < 1 || out_dim < 1) {
    throw Error(ErrorCode::InvalidArgument, "MLP dimensions must be >= 1");
  }
  SplitMix64 rng(seed);
  MlpParams<float> p{Mat<float>(in_dim, hidden), RowVec<float>::Zero(hidden),
                     Mat<float>(hidden, out_dim), RowVec<float>::Zero(out_dim)};
  const double a1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (Eigen::Index i = 0; i < p.w1.size(); ++i)
    p.w1.data()[i] = static_cast<float>(rng.uniform(-a1, a1));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Eigen::Index i = 0; i < p.w2.size(); ++i)
    p.w2.data()[i] = static_cast<float>(rng.uniform(-a2, a2));
  return p;
}

template <typename T>
T gelu(T z) {
  return T(0.5) * z * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T z) {
  const T cdf = T(0.5) * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * z * z) * std::numbers::inv_sqrtpi_v<T> /
                std::numbers::sqrt2_v<T>;
  return cdf + z * pdf;
}

template <typename T>
Mat<T> mlp_forward(const Mat<T>& x, const MlpParams<T>& p) {
  check_forward_shapes(x, p);
  Mat<T> hidden = (x * p.w1).rowwise() + p.b1;
  hidden = hidden.unaryExpr([](T z) { return gelu(z); });
  Mat<T> out = (hidden * p.w2).rowwise() + p.b2;
  return out;
}

template <typename T>
T alignment_loss(const Mat<T>& pred, const Mat<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "pred " + shape_str(pred.rows(), pred.cols()) +
                                              " vs target " +
                                              shape_str(target.rows(), target.cols()));
  }
  if (pred.rows() == 0) throw Error(ErrorCode::EmptyDataset, "alignment_loss on zero rows");
  T total = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const T np = pred.row(i).norm();
    const T nt = target.row(i).norm();
    if (np == T(0) || nt == T(0)) {
      throw Error(ErrorCode::ZeroVector, std::string(np == T(0) ? "pred" : "target") +
                                             " row " + std::to_string(i) + " has zero norm");
    }
    const T cos = std::clamp(pred.row(i).dot(target.row(i)) / (np * nt), T(-1), T(1));
    total += T(1) - cos;
  }
  return total / static_cast<T>(pred.rows());
}

template <typename T>
LossAndGrads<T> mlp_backward(const Mat<T>& x, const Mat<T>& target, const MlpParams<T>& p) {
  check_forward_shapes(x, p);
  const Mat<T> pre = (x * p.w1).rowwise() + p.b1;
  const Mat<T> act = pre.unaryExpr([](T z) { return gelu(z); });
  const Mat<T> pred = (act * p.w2).rowwise() + p.b2;
  const T loss = alignment_loss(pred, target);

  // d/dp (1 - p.t / (|p||t|)) = -(t / (|p||t|) - (p.t) p / (|p|^3 |t|))
  const Eigen::Index n = pred.rows();
  Mat<T> d_pred(n, pred.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T np = pred.row(i).norm();
    const T nt = target.row(i).norm();
    const T dot = pred.row(i).dot(target.row(i));
    d_pred.row(i) = -(target.row(i) / (np * nt) - pred.row(i) * (dot / (np * np * np * nt))) /
                    static_cast<T>(n);
  }

  LossAndGrads<T> out{loss, {}};
  out.grads.w2 = act.transpose() * d_pred;
  out.grads.b2 = d_pred.colwise().sum();
  const Mat<T> d_act = d_pred * p.w2.transpose();
  const Mat<T> d_pre =
      d_act.cwiseProduct(pre.unaryExpr([](T z) { return gelu_grad(z); }));
  out.grads.w1 = x.transpose() * d_pre;
  out.grads.b1 = d_pre.colwise().sum();
  return out;
}

Stage parse_stage(const std::string& name) {
  if (name == "ConnectorPretrain") return Stage::ConnectorPretrain;
  if (name == "InstructFinetune") return Stage::InstructFinetune;
  throw Error(ErrorCode::InvalidArgument, "train.stage: unknown value '" + name + "'");
}

std::string to_string(Stage stage) {
  return stage == Stage::ConnectorPretrain ? "ConnectorPretrain" : "InstructFinetune";
}

TrainConfig TrainConfig::for_stage(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  if (stage == Stage::InstructFinetune) {
    cfg.learning_rate = 2e-5;
    cfg.global_batch = 128;
  }
  return cfg;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::InvalidConfig, "train.learning_rate must be positive");
  }
  if (global_batch == 0) throw Error(ErrorCode::InvalidConfig, "train.global_batch must be >= 1");
  if (epochs == 0) throw Error(ErrorCode::InvalidConfig, "train.epochs must be >= 1");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "train.warmup_ratio must be in [0, 1]");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw Error(ErrorCode::InvalidConfig, "train.weight_decay must be >= 0");
  }
}

FreezeMask FreezeMask::for_stage(Stage stage) {
  FreezeMask mask;
  mask.language_model = stage == Stage::InstructFinetune;
  return mask;
}

uint64_t warmup_steps(uint64_t total_steps, const TrainConfig& cfg) {
  const auto w = static_cast<uint64_t>(std::llround(cfg.warmup_ratio * static_cast<double>(total_steps)));
  return std::max<uint64_t>(1, w);
}

double lr_at(uint64_t step, uint64_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0 || step > total_steps) {
    throw Error(ErrorCode::InvalidArgument, "lr_at: need 0 <= step <= total_steps, total >= 1");
  }
  const uint64_t warm = warmup_steps(total_steps, cfg);
  if (step < warm) {
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  if (step >= total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainResult train_stage(const Mat<float>& inputs, const Mat<float>& targets,
                        const TrainConfig& cfg, const FreezeMask& mask,
                        const MlpParams<float>& p0) {
  cfg.validate();
  p0.validate();
  if (mask.encoder) {
    throw Error(ErrorCode::InvalidConfig, "freeze mask: the vision encoder must stay frozen");
  }
  if (inputs.rows() == 0) throw Error(ErrorCode::EmptyDataset, "no training rows");
  if (targets.rows() != inputs.rows()) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(inputs.rows()) + " input rows vs " +
                                              std::to_string(targets.rows()) + " target rows");
  }
  if (inputs.cols() != p0.in_dim() || targets.cols() != p0.out_dim()) {
    throw Error(ErrorCode::ShapeMismatch,
                "data " + shape_str(inputs.rows(), inputs.cols()) + " -> " +
                    shape_str(targets.rows(), targets.cols()) + " does not fit params " +
                    shape_str(p0.in_dim(), p0.out_dim()));
  }
  const auto n = static_cast<uint64_t>(inputs.rows());
  if (cfg.global_batch > n) {
    throw Error(ErrorCode::InvalidConfig, "train.global_batch " + std::to_string(cfg.global_batch) +
                                              " exceeds dataset size " + std::to_string(n));
  }

  const uint64_t steps_per_epoch = (n + cfg.global_batch - 1) / cfg.global_batch;
  TrainResult result{p0, {}, steps_per_epoch * cfg.epochs};
  result.trace.reserve(result.total_steps);
  MlpParams<float>& p = result.params;
  AdamState<float> state{zeros_like(p), zeros_like(p)};

  SplitMix64 rng(cfg.seed);
  std::vector<Eigen::Index> order(n);
  uint64_t step = 0;
  for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    seeded_shuffle(std::span(order), rng);
    for (uint64_t start = 0; start < n; start += cfg.global_batch, ++step) {
      const uint64_t len = std::min<uint64_t>(cfg.global_batch, n - start);
      Mat<float> xb(len, inputs.cols());
      Mat<float> yb(len, targets.cols());
      for (uint64_t r = 0; r < len; ++r) {
        xb.row(r) = inputs.row(order[start + r]);
        yb.row(r) = targets.row(order[start + r]);
      }
      const double lr = lr_at(step, result.total_steps, cfg);
      auto [loss, g] = mlp_backward(xb, yb, p);
      const uint64_t t = step + 1;
      if (mask.connector_in) {
        adamw_step(p.w1, g.w1, state.m.w1, state.v.w1, lr, cfg.weight_decay, t);
        adamw_step(p.b1, g.b1, state.m.b1, state.v.b1, lr, cfg.weight_decay, t);
      }
      if (mask.connector_out) {
        adamw_step(p.w2, g.w2, state.m.w2, state.v.w2, lr, cfg.weight_decay, t);
        adamw_step(p.b2, g.b2, state.m.b2, state.v.b2, lr, cfg.weight_decay, t);
      }
      result.trace.push_back({step, lr, static_cast<double>(loss)});
    }
  }
  return result;
}

TensorF32 to_tensor(const Mat<float>& m) {
  return TensorF32({static_cast<uint32_t>(m.rows()), static_cast<uint32_t>(m.cols())},
                   std::vector<float>(m.data(), m.data() + m.size()));
}

TensorF32 to_tensor(const RowVec<float>& v) {
  return TensorF32({static_cast<uint32_t>(v.size())},
                   std::vector<float>(v.data(), v.data() + v.size()));
}

Mat<float> matrix_from_tensor(const TensorF32& t) {
  if (t.ndim() != 2) {
    throw Error(ErrorCode::ShapeMismatch, "expected a 2-D tensor, got ndim " + std::to_string(t.ndim()));
  }
  Mat<float> m(t.dims()[0], t.dims()[1]);
  std::copy(t.data().begin(), t.data().end(), m.data());
  return m;
}

void save_checkpoint(const std::filesystem::path& dir, const MlpParams<float>& p,
                     const CheckpointInfo& info) {
  p.validate();
  std::filesystem::create_directories(dir);
  save_mstf(dir / "w1.mstf", to_tensor(p.w1));
  save_mstf(dir / "b1.mstf", to_tensor(p.b1));
  save_mstf(dir / "w2.mstf", to_tensor(p.w2));
  save_mstf(dir / "b2.mstf", to_tensor(p.b2));
  nlohmann::ordered_json manifest;
  manifest["shapes"] = {{"w1", {p.w1.rows(), p.w1.cols()}},
                        {"b1", {p.b1.size()}},
                        {"w2", {p.w2.rows(), p.w2.cols()}},
                        {"b2", {p.b2.size()}}};
  manifest["seed"] = info.seed;
  manifest["stage"] = to_string(info.stage);
  manifest["step"] = info.step;
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

MlpParams<float> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info) {
  const auto bytes = read_file_bytes(dir / "manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (info) {
      info->seed = manifest.at("seed").get<uint64_t>();
      info->stage = parse_stage(manifest.at("stage").get<std::string>());
      info->step = manifest.at("step").get<uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, (dir / "manifest.json").string() + ": " + e.what());
  }
  auto vec = [](const TensorF32& t) {
    if (t.ndim() != 1) throw Error(ErrorCode::ShapeMismatch, "bias tensor must be 1-D");
    RowVec<float> v(t.dims()[0]);
    std::copy(t.data().begin(), t.data().end(), v.data());
    return v;
  };
  MlpParams<float> p{matrix_from_tensor(load_mstf(dir / "w1.mstf")), vec(load_mstf(dir / "b1.mstf")),
                     matrix_from_tensor(load_mstf(dir / "w2.mstf")), vec(load_mstf(dir / "b2.mstf"))};
  p.validate();
  const auto& shapes = manifest.at("shapes");
  if (shapes.at("w1") != nlohmann::json{p.w1.rows(), p.w1.cols()} ||
      shapes.at("w2") != nlohmann::json{p.w2.rows(), p.w2.cols()}) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint tensors disagree with manifest shapes");
  }
  return p;
}

std::string loss_trace_csv(const std::vector<StepLog>& trace) {
  std::string out = "step,lr,loss\n";
  char line[96];
  for (const auto& s : trace) {
    std::snprintf(line, sizeof(line), "%llu,%.9g,%.9g\n", static_cast<unsigned long long>(s.step),
                  s.lr, s.loss);
    out += line;
  }
  return out;
}

template struct MlpParams<float>;
template struct MlpParams<double>;
template float gelu(float);
template double gelu(double);
template float gelu_grad(float);
template double gelu_grad(double);
template Mat<float> mlp_forward(const Mat<float>&, const MlpParams<float>&);
template Mat<double> mlp_forward(const Mat<double>&, const MlpParams<double>&);
template float alignment_loss(const Mat<float>&, const Mat<float>&);
template double alignment_loss(const Mat<double>&, const Mat<double>&);
template LossAndGrads<float> mlp_backward(const Mat<float>&, const Mat<float>&,
                                          const MlpParams<float>&);
template LossAndGrads<double> mlp_backward(const Mat<double>&, const Mat<double>&,
                                           const MlpParams<double>&);

}  // namespace medmm
