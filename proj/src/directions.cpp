#include "latentlens/directions.hpp"

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "latentlens/binio.hpp"
#include "latentlens/losses.hpp"

namespace latentlens {

std::string to_string(ColumnMode mode) { return mode == ColumnMode::unit ? "unit" : "orthonormal"; }
std::string to_string(Backbone backbone) { return backbone == Backbone::lenet ? "lenet" : "resnet"; }

ColumnMode parse_column_mode(const std::string& s) {
  if (s == "unit") return ColumnMode::unit;
  if (s == "orthonormal") return ColumnMode::orthonormal;
  throw Error(ErrorCategory::config, "unknown column mode '" + s + "' (expected unit or orthonormal)");
}

Backbone parse_backbone(const std::string& s) {
  if (s == "lenet") return Backbone::lenet;
  if (s == "resnet") return Backbone::resnet;
  throw Error(ErrorCategory::config, "unknown reconstructor '" + s + "' (expected lenet or resnet)");
}

void project_columns(Tensor& a, ColumnMode mode) {
  if (a.rank() != 2) throw Error(ErrorCategory::shape, "project_columns: expected [d, K], got " + shape_str(a.shape()));
  const int d = static_cast<int>(a.dim(0)), k = static_cast<int>(a.dim(1));
  auto v = a.mutable_data();
  if (mode == ColumnMode::unit) {
    for (int j = 0; j < k; ++j) {
      double norm = 0;
      for (int i = 0; i < d; ++i) norm += static_cast<double>(v[i * k + j]) * v[i * k + j];
      norm = std::sqrt(norm);
      if (!(norm > 1e-12)) {
        throw Error(ErrorCategory::numeric, "project_columns: column " + std::to_string(j) + " has zero length");
      }
      for (int i = 0; i < d; ++i) v[i * k + j] = static_cast<float>(v[i * k + j] / norm);
    }
    return;
  }
  if (k > d) {
    throw Error(ErrorCategory::config, "project_columns: " + std::to_string(k) +
                                           " orthonormal columns do not fit in dimension " + std::to_string(d));
  }
  Eigen::MatrixXd m(d, k);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < k; ++j) m(i, j) = v[i * k + j];
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const double scale = std::max(1.0, r.diagonal().cwiseAbs().maxCoeff());
  for (int j = 0; j < k; ++j) {
    if (std::abs(r(j, j)) <= 1e-10 * scale) {
      throw Error(ErrorCategory::numeric, "project_columns: column " + std::to_string(j) +
                                              " is linearly dependent on the previous ones");
    }
  }
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
  for (int j = 0; j < k; ++j)
    if (r(j, j) < 0) q.col(j) *= -1;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < k; ++j) v[i * k + j] = static_cast<float>(q(i, j));
}

DirectionMatrix::DirectionMatrix(int latent_dim, int k, ColumnMode mode, Rng& rng) : mode_(mode) {
  if (latent_dim < 1 || k < 1) throw Error(ErrorCategory::config, "directions: d and K must be positive");
  if (mode == ColumnMode::orthonormal && k > latent_dim) {
    throw Error(ErrorCategory::config, "directions: orthonormal mode needs K <= d, got K=" + std::to_string(k) +
                                           " d=" + std::to_string(latent_dim));
  }
  a_ = Tensor::randn({latent_dim, k}, rng);
  project();
  a_.set_requires_grad(true);
}

DirectionMatrix::DirectionMatrix(Tensor a, ColumnMode mode) : a_(std::move(a)), mode_(mode) {
  if (a_.rank() != 2) throw Error(ErrorCategory::shape, "directions: expected [d, K], got " + shape_str(a_.shape()));
  if (mode == ColumnMode::orthonormal && a_.dim(1) > a_.dim(0)) {
    throw Error(ErrorCategory::config, "directions: orthonormal mode needs K <= d, got " + shape_str(a_.shape()));
  }
  a_.set_requires_grad(true);
}

Tensor DirectionMatrix::shift(const Tensor& z, const Tensor& coeffs) const {
  if (z.rank() != 2 || z.dim(1) != latent_dim() || coeffs.rank() != 2 || coeffs.dim(0) != z.dim(0) ||
      coeffs.dim(1) != k()) {
    throw Error(ErrorCategory::shape, "directions: cannot shift z " + shape_str(z.shape()) + " by coefficients " +
                                          shape_str(coeffs.shape()) + " with A " + shape_str(a_.shape()));
  }
  return add(z, matmul(coeffs, transpose(a_)));
}

Tensor DirectionMatrix::shift(const Tensor& z, std::span<const int> ks, std::span<const float> alpha) const {
  const std::int64_t b = z.dim(0);
  if (static_cast<std::int64_t>(ks.size()) != b || static_cast<std::int64_t>(alpha.size()) != b) {
    throw Error(ErrorCategory::shape, "directions: " + std::to_string(ks.size()) + " indices and " +
                                          std::to_string(alpha.size()) + " magnitudes for " + std::to_string(b) +
                                          " latents");
  }
  std::vector<float> c(static_cast<std::size_t>(b) * k(), 0.0f);
  for (std::int64_t i = 0; i < b; ++i) {
    if (ks[i] < 0 || ks[i] >= k()) {
      throw Error(ErrorCategory::shape, "directions: index " + std::to_string(ks[i]) + " out of range for K=" +
                                            std::to_string(k()));
    }
    c[i * k() + ks[i]] = alpha[i];
  }
  return shift(z, Tensor({b, k()}, std::move(c)));
}

double DirectionMatrix::constraint_error() const {
  const int d = latent_dim(), kk = k();
  const auto v = a_.data();
  double worst = 0;
  if (mode_ == ColumnMode::unit) {
    for (int j = 0; j < kk; ++j) {
      double norm = 0;
      for (int i = 0; i < d; ++i) norm += static_cast<double>(v[i * kk + j]) * v[i * kk + j];
      worst = std::max(worst, std::abs(std::sqrt(norm) - 1.0));
    }
    return worst;
  }
  for (int p = 0; p < kk; ++p)
    for (int q = 0; q < kk; ++q) {
      double dot = 0;
      for (int i = 0; i < d; ++i) dot += static_cast<double>(v[i * kk + p]) * v[i * kk + q];
      worst = std::max(worst, std::abs(dot - (p == q ? 1.0 : 0.0)));
    }
  return worst;
}

std::vector<float> DirectionMatrix::column(int j) const {
  if (j < 0 || j >= k()) throw Error(ErrorCategory::shape, "directions: column " + std::to_string(j) + " out of range");
  std::vector<float> out(latent_dim());
  for (int i = 0; i < latent_dim(); ++i) out[i] = a_[static_cast<std::size_t>(i) * k() + j];
  return out;
}

namespace {

int stage_count(int size) {
  if (size < 16 || (size & (size - 1)) != 0) {
    throw Error(ErrorCategory::config, "reconstructor: image size must be a power of two >= 16, got " +
                                           std::to_string(size));
  }
  return std::countr_zero(static_cast<unsigned>(size)) - 2;
}

nn::Linear small_head(int in, int out, Rng& rng) {
  nn::Linear l(in, out, nn::Init::he, rng);
  for (auto& w : l.weight.mutable_data()) w *= 0.01f;
  return l;
}

}  // namespace

Reconstructor::Reconstructor(const ReconstructorArch& arch, Rng& rng) : arch_(arch) {
  if (arch.k < 1 || arch.width < 1) throw Error(ErrorCategory::config, "reconstructor: K and width must be positive");
  const int stages = stage_count(arch.image_size);
  const int w = arch.width;
  if (arch.backbone == Backbone::lenet) {
    const int s1 = (arch.image_size - 4) / 2;
    const int s2 = (s1 - 4) / 2;
    conv1_ = nn::Conv2d(2, w, 5, {1, 0}, nn::Init::he, rng);
    conv2_ = nn::Conv2d(w, 2 * w, 5, {1, 0}, nn::Init::he, rng);
    fc_ = nn::Linear(2 * w * s2 * s2, 8 * w, nn::Init::he, rng);
    features_ = 8 * w;
  } else {
    stem_ = nn::Conv2d(2, w, 3, {1, 1}, nn::Init::he, rng);
    stem_bn_ = nn::BatchNorm2d(w, nn::Init::he, rng);
    int in = w;
    for (int i = 0; i < stages; ++i) {
      const int out = w * std::min(4, 1 << (i + 1));
      blocks_.emplace_back(ResBlock::Kind::down, in, out, rng);
      in = out;
    }
    features_ = in;
  }
  k_head_ = small_head(features_, arch.k, rng);
  alpha_head_ = small_head(features_, 1, rng);
}

Tensor Reconstructor::trunk(const Tensor& x, bool training) const {
  const std::int64_t b = x.dim(0);
  if (arch_.backbone == Backbone::lenet) {
    Tensor h = avg_pool2d(relu(conv1_(x)), 2);
    h = avg_pool2d(relu(conv2_(h)), 2);
    return relu(fc_(reshape(h, {b, static_cast<std::int64_t>(h.numel()) / b})));
  }
  Tensor h = relu(stem_bn_(stem_(x), training));
  for (const auto& block : blocks_) h = block(h, training);
  h = avg_pool2d(h, static_cast<int>(h.dim(2)));
  return reshape(h, {b, features_});
}

ReconstructorOutput Reconstructor::operator()(const Tensor& original, const Tensor& shifted, bool training) const {
  const Shape want{original.rank() == 4 ? original.dim(0) : 0, 1, arch_.image_size, arch_.image_size};
  if (original.shape() != want || shifted.shape() != want) {
    throw Error(ErrorCategory::shape, "reconstructor: expected two [B, 1, " + std::to_string(arch_.image_size) + ", " +
                                          std::to_string(arch_.image_size) + "] images, got " +
                                          shape_str(original.shape()) + " and " + shape_str(shifted.shape()));
  }
  const Tensor f = trunk(concat_channels(original, sub(shifted, original)), training);
  return {k_head_(f), alpha_head_(f)};
}

void Reconstructor::visit(const std::string& prefix, const nn::StateVisitor& f) {
  if (arch_.backbone == Backbone::lenet) {
    conv1_.visit(prefix + "conv1.", f);
    conv2_.visit(prefix + "conv2.", f);
    fc_.visit(prefix + "fc.", f);
  } else {
    stem_.visit(prefix + "stem.", f);
    stem_bn_.visit(prefix + "stem_bn.", f);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(prefix + "block" + std::to_string(i) + ".", f);
  }
  k_head_.visit(prefix + "k_head.", f);
  alpha_head_.visit(prefix + "alpha_head.", f);
}

void sample_shift_params(Rng& rng, int batch, int k, const DirectionTrainConfig& config, std::vector<int>& ks,
                         std::vector<float>& alphas) {
  if (!(config.alpha_max > config.alpha_min) || config.alpha_min < 0) {
    throw Error(ErrorCategory::config, "directions: need 0 <= alpha_min < alpha_max");
  }
  ks.resize(batch);
  alphas.resize(batch);
  for (int i = 0; i < batch; ++i) {
    ks[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    double a;
    do {
      a = rng.uniform(-config.alpha_max, config.alpha_max);
    } while (std::abs(a) < config.alpha_min);
    alphas[i] = config.force_alpha ? *config.force_alpha : static_cast<float>(a);
  }
}

ShiftBatch sample_shift(const DirectionMatrix& a, const LatentGenerator& g, Rng& rng, int batch,
                        const DirectionTrainConfig& config) {
  if (a.latent_dim() != g.latent_dim()) {
    throw Error(ErrorCategory::shape, "directions: A has d=" + std::to_string(a.latent_dim()) +
                                          " but the generator expects " + std::to_string(g.latent_dim()));
  }
  ShiftBatch s;
  s.z = Tensor::randn({batch, g.latent_dim()}, rng);
  sample_shift_params(rng, batch, a.k(), config, s.k, s.alpha);
  {
    NoGradGuard guard;
    s.original = g.generate(s.z);
  }
  s.shifted = g.generate(a.shift(s.z, s.k, s.alpha));
  return s;
}

namespace {

std::vector<NamedParam<float>> direction_parameters(DirectionMatrix& a, Reconstructor& r) {
  std::vector<NamedParam<float>> params{{"A", a.matrix()}};
  for (auto& p : nn::parameters(r)) params.push_back({"reconstructor." + p.name, p.tensor});
  return params;
}

int argmax_row(const Tensor& logits, std::int64_t row) {
  const std::int64_t k = logits.dim(1);
  const auto v = logits.data().subspan(row * k, k);
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

DirectionTrainer::DirectionTrainer(DirectionMatrix& a, Reconstructor& r, LatentGenerator& g,
                                   const DirectionTrainConfig& config, Rng rng)
    : a_(a), r_(r), g_(g), config_(config), rng_(rng), opt_(direction_parameters(a, r), {.lr = config.lr}) {
  if (!(config.gamma >= 0)) throw Error(ErrorCategory::config, "directions: gamma must be non-negative");
  if (config.batch < 2) throw Error(ErrorCategory::config, "directions: batch must be at least 2");
  if (r.arch().k != a.k()) {
    throw Error(ErrorCategory::config, "directions: reconstructor predicts " + std::to_string(r.arch().k) +
                                           " classes but A has " + std::to_string(a.k()) + " columns");
  }
  if (r.arch().image_size != g.image_height() || g.image_height() != g.image_width()) {
    throw Error(ErrorCategory::config, "directions: reconstructor input size does not match the generator");
  }
  g_.set_frozen(true);
}

DirectionTrainer::~DirectionTrainer() { g_.set_frozen(false); }

DirectionLosses DirectionTrainer::step() {
  const ShiftBatch s = sample_shift(a_, g_, rng_, config_.batch, config_);
  const ReconstructorOutput out = r_(s.original, s.shifted, true);
  const Tensor l_cl = softmax_cross_entropy(out.logits, std::span<const int>(s.k));
  const Tensor l_s = mae(out.alpha, Tensor({config_.batch, 1}, s.alpha));
  const Tensor loss = add(l_cl, scale(l_s, static_cast<float>(config_.gamma)));
  DirectionLosses result{l_cl.item(), l_s.item(), 0.0};
  if (!std::isfinite(loss.item())) {
    throw Error(ErrorCategory::numeric, "directions: non-finite loss at iteration " + std::to_string(iter_));
  }
  int correct = 0;
  for (int i = 0; i < config_.batch; ++i) correct += argmax_row(out.logits, i) == s.k[i];
  result.accuracy = static_cast<double>(correct) / config_.batch;

  backward(loss);
  opt_.step();
  a_.project();
  ++iter_;
  if (config_.check_constraints) {
    const double err = a_.constraint_error();
    const double tol = a_.mode() == ColumnMode::unit ? 1e-5 : 1e-4;
    if (!(err < tol)) {
      throw Error(ErrorCategory::numeric, "directions: column constraint violated by " + std::to_string(err) +
                                              " after iteration " + std::to_string(iter_));
    }
  }
  return result;
}

std::vector<MetricsRow> DirectionTrainer::run(const std::function<void(std::int64_t, const DirectionMatrix&)>& on_step,
                                             const std::function<void(const MetricsRow&)>& on_row) {
  std::vector<MetricsRow> rows;
  MetricsRow acc;
  int in_interval = 0;
  for (int i = 0; i < config_.iters; ++i) {
    const DirectionLosses l = step();
    acc.l_cl += l.l_cl;
    acc.l_s += l.l_s;
    acc.rca += l.accuracy;
    ++in_interval;
    if (on_step) on_step(iter_, a_);
    if (config_.log_every > 0 && (iter_ % config_.log_every == 0 || i + 1 == config_.iters)) {
      rows.push_back({iter_, acc.l_cl / in_interval, acc.l_s / in_interval, acc.rca / in_interval});
      if (on_row) on_row(rows.back());
      acc = {};
      in_interval = 0;
    }
  }
  return rows;
}

RcaReport rca_eval(const DirectionMatrix& a, const Reconstructor& r, const LatentGenerator& g, std::int64_t n_samples,
                   Rng rng, const DirectionTrainConfig& config, int batch) {
  if (n_samples < 1 || batch < 1) throw Error(ErrorCategory::config, "rca_eval: sample count must be positive");
  NoGradGuard guard;
  RcaReport report;
  std::int64_t correct = 0;
  double abs_err = 0, ce = 0;
  for (std::int64_t done = 0; done < n_samples;) {
    const int b = static_cast<int>(std::min<std::int64_t>(batch, n_samples - done));
    const ShiftBatch s = sample_shift(a, g, rng, b, config);
    const ReconstructorOutput out = r(s.original, s.shifted, false);
    ce += softmax_cross_entropy(out.logits, std::span<const int>(s.k)).item() * b;
    for (int i = 0; i < b; ++i) {
      correct += argmax_row(out.logits, i) == s.k[i];
      abs_err += std::abs(static_cast<double>(out.alpha[i]) - s.alpha[i]);
    }
    done += b;
  }
  report.samples = n_samples;
  report.rca = static_cast<double>(correct) / static_cast<double>(n_samples);
  report.l_s = abs_err / static_cast<double>(n_samples);
  report.l_cl = ce / static_cast<double>(n_samples);
  return report;
}

double rca_with(const DirectionMatrix& a, const LatentGenerator& g, const KPredictor& predict, std::int64_t n_samples,
                Rng rng, const DirectionTrainConfig& config, int batch) {
  if (n_samples < 1 || batch < 1) throw Error(ErrorCategory::config, "rca_with: sample count must be positive");
  NoGradGuard guard;
  std::int64_t correct = 0;
  for (std::int64_t done = 0; done < n_samples;) {
    const int b = static_cast<int>(std::min<std::int64_t>(batch, n_samples - done));
    const ShiftBatch s = sample_shift(a, g, rng, b, config);
    const std::vector<int> pred = predict(s);
    if (static_cast<int>(pred.size()) != b) throw Error(ErrorCategory::shape, "rca_with: predictor returned wrong count");
    for (int i = 0; i < b; ++i) correct += pred[i] == s.k[i];
    done += b;
  }
  return static_cast<double>(correct) / static_cast<double>(n_samples);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::string out = "iter,L_cl,L_s,RCA\n";
  char line[128];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g\n", static_cast<long long>(r.iter), r.l_cl, r.l_s, r.rca);
    out += line;
  }
  write_text_atomic(path, out);
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".json";
  return p;
}

void save_directions(const std::filesystem::path& path, const DirectionMatrix& a, Reconstructor& r,
                     const std::string& generator_checksum) {
  ModelCheckpoint ckpt;
  ckpt.add("A", a.matrix());
  ckpt.merge(nn::state(r), "reconstructor.");
  write_checkpoint(path, ckpt);
  const nlohmann::ordered_json j{{"mode", to_string(a.mode())},
                                 {"K", a.k()},
                                 {"d", a.latent_dim()},
                                 {"backbone", to_string(r.arch().backbone)},
                                 {"width", r.arch().width},
                                 {"image_size", r.arch().image_size},
                                 {"generator_checksum", generator_checksum}};
  write_text_atomic(sidecar_path(path), j.dump(2) + "\n");
}

DirectionsSidecar read_sidecar(const std::filesystem::path& checkpoint) {
  const auto bytes = read_file(sidecar_path(checkpoint));
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    DirectionsSidecar s;
    s.mode = parse_column_mode(j.at("mode").get<std::string>());
    s.k = j.at("K").get<int>();
    s.d = j.at("d").get<int>();
    s.backbone = parse_backbone(j.at("backbone").get<std::string>());
    s.width = j.at("width").get<int>();
    s.image_size = j.at("image_size").get<int>();
    s.generator_checksum = j.at("generator_checksum").get<std::string>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::format, "directions sidecar " + sidecar_path(checkpoint).string() + ": " + e.what());
  }
}

DirectionMatrix load_direction_matrix(const std::filesystem::path& path) {
  const DirectionsSidecar side = read_sidecar(path);
  const ModelCheckpoint ckpt = read_checkpoint(path);
  const Tensor& a = ckpt.at("A");
  if (a.shape() != Shape{side.d, side.k}) {
    throw Error(ErrorCategory::format, "directions: A has shape " + shape_str(a.shape()) + ", sidecar declares d=" +
                                           std::to_string(side.d) + " K=" + std::to_string(side.k));
  }
  return DirectionMatrix(a.clone(), side.mode);
}

}  // namespace latentlens
