#include "latentlens/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "latentlens/binio.hpp"
#include "latentlens/directions.hpp"
#include "latentlens/pipeline.hpp"
#include "latentlens/png.hpp"
#include "latentlens/service.hpp"

extern "C" void openblas_set_num_threads(int);

namespace latentlens {

using nlohmann::ordered_json;

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw Error(ErrorCategory::config, "setting '" + key + "': '" + value + "' is not " + want);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::string Settings::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCategory::config, "missing setting '" + key + "'");
  return it->second;
}

std::int64_t Settings::integer(const std::string& key) const {
  const std::string v = str(key);
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (...) {
    bad_value(key, v, "an integer");
  }
  if (used != v.size()) bad_value(key, v, "an integer");
  return out;
}

std::uint64_t Settings::u64(const std::string& key) const {
  const std::string v = str(key);
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    out = std::stoull(v, &used);
  } catch (...) {
    bad_value(key, v, "a non-negative integer");
  }
  if (used != v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double Settings::real(const std::string& key) const {
  const std::string v = str(key);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (...) {
    bad_value(key, v, "a number");
  }
  if (used != v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

bool Settings::flag(const std::string& key) const {
  const std::string v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::filesystem::path Settings::path(const std::string& key) const { return str(key); }

std::vector<double> Settings::reals(const std::string& key) const {
  std::vector<double> out;
  std::stringstream in(str(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    Settings one;
    one.set(key, trim(item));
    out.push_back(one.real(key));
  }
  return out;
}

Settings parse_key_values(const std::string& text) {
  Settings s;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
      throw Error(ErrorCategory::config, "config line " + std::to_string(number) + ": expected key = value");
    }
    s.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return s;
}

Settings read_settings_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  if (path.extension() != ".json") return parse_key_values(text);
  try {
    const auto j = nlohmann::json::parse(text);
    Settings s;
    for (const auto& [key, value] : j.at("settings").items()) s.set(key, value.get<std::string>());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::format, "config snapshot " + path.string() + ": " + e.what());
  }
}

namespace {

// Keys with a fixed default; "" marks a key that must be provided or is
// filled in by resolve_settings.
using Defaults = std::vector<std::pair<std::string, std::string>>;

Defaults command_defaults(const std::string& command) {
  if (command == "gen-data") return {{"seed", "1"}, {"out", ""}, {"n", "10000"}, {"size", "32"}, {"noise", "true"}};
  if (command == "train") {
    return {{"seed", "1"},         {"out", ""},           {"data", ""},           {"model", "vae"},
            {"epochs", ""},        {"batch", "64"},       {"latent_dim", "32"},   {"channels", ""},
            {"feature_dim", "64"}, {"lr", ""},            {"beta", "0.01"},       {"sigma0", "0.1"},
            {"extractor", ""},     {"fid_samples", "500"}, {"log_every", "10"},   {"split_seed", "0"},
            {"test_fraction", "0.1"}};
  }
  if (command == "discover") {
    return {{"seed", "1"},      {"out", ""},          {"checkpoint", ""}, {"k", "32"},      {"mode", "unit"},
            {"reconstructor", "lenet"}, {"width", "16"}, {"gamma", "0.25"}, {"alpha_max", "6"}, {"iters", ""},
            {"batch", "32"},    {"lr", "1e-3"},       {"log_every", "100"}, {"check_constraints", "true"},
            {"constraint_every", "50"}};
  }
  if (command == "eval") {
    return {{"seed", "1"},          {"out", ""},            {"checkpoint", ""},     {"directions", ""},
            {"data", ""},           {"extractor", ""},      {"split_seed", "0"},    {"test_fraction", "0.1"},
            {"n_rca", "10000"},     {"n_z", "32"},          {"grid_points", "13"},  {"random_baseline", "false"},
            {"random_count", "10"}, {"interp_pairs", "10"}, {"interp_frames", "10"}, {"search_steps", "500"},
            {"search_lr", "0.05"},  {"fid_samples", "500"}, {"alpha_max", "6"}};
  }
  if (command == "render") {
    return {{"seed", "1"},     {"out", ""},     {"checkpoint", ""}, {"directions", ""},     {"ks", "all"},
            {"alphas", "-6,-3,0,3,6"}, {"n_z", "8"}, {"frames", "16"}, {"alpha_max", "6"}};
  }
  if (command == "serve") {
    return {{"seed", "1"},         {"checkpoint", ""},       {"directions", ""}, {"port", "8080"},
            {"host", "127.0.0.1"}, {"labels", "labels.jsonl"}, {"report", ""},     {"alpha_max", "6"}};
  }
  throw Error(ErrorCategory::config, "unknown command '" + command + "'");
}

void require(const Settings& s, std::initializer_list<const char*> keys) {
  for (const char* key : keys) {
    if (s.str(key).empty()) throw Error(ErrorCategory::config, std::string("setting '") + key + "' is required");
  }
}

int checked_int(const Settings& s, const std::string& key, std::int64_t lo, std::int64_t hi = 1'000'000'000) {
  const std::int64_t v = s.integer(key);
  if (v < lo || v > hi) {
    throw Error(ErrorCategory::config, "setting '" + key + "' must be in [" + std::to_string(lo) + ", " +
                                           std::to_string(hi) + "], got " + std::to_string(v));
  }
  return static_cast<int>(v);
}

double positive(const Settings& s, const std::string& key) {
  const double v = s.real(key);
  if (!(v > 0)) throw Error(ErrorCategory::config, "setting '" + key + "' must be positive");
  return v;
}

ModelKind checkpoint_kind(const std::filesystem::path& path) {
  return load_model(path).kind;
}

}  // namespace

std::vector<std::string> command_keys(const std::string& command) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : command_defaults(command)) keys.push_back(k);
  return keys;
}

Settings resolve_settings(const std::string& command, const Settings& file, const Settings& overrides) {
  Settings s;
  for (const auto& [k, v] : command_defaults(command)) s.set(k, v);
  for (const Settings* layer : {&file, &overrides}) {
    for (const auto& [k, v] : layer->values()) {
      if (!s.has(k)) throw Error(ErrorCategory::config, "unknown setting '" + k + "' for command " + command);
      s.set(k, v);
    }
  }
  if (command == "train") {
    const std::string model = s.str("model");
    if (model != "vae" && model != "gan") bad_value("model", model, "vae or gan");
    const bool vae = model == "vae";
    if (s.str("epochs").empty()) s.set("epochs", vae ? "15" : "25");
    if (s.str("channels").empty()) s.set("channels", vae ? "8" : "64");
    if (s.str("lr").empty()) s.set("lr", vae ? "1e-4" : "2e-4");
  }
  if (command == "discover" && s.str("iters").empty() && !s.str("checkpoint").empty()) {
    const int base = parse_backbone(s.str("reconstructor")) == Backbone::lenet ? 6000 : 1500;
    s.set("iters", std::to_string(checkpoint_kind(s.path("checkpoint")) == ModelKind::gan ? 4 * base : base));
  }
  return s;
}

void write_settings_snapshot(const std::filesystem::path& path, const std::string& command, const Settings& s) {
  ordered_json settings = ordered_json::object();
  for (const auto& [k, v] : s.values()) settings[k] = v;
  write_text_atomic(path, ordered_json{{"command", command}, {"settings", settings}}.dump(2) + "\n");
}

void apply_thread_limit() {
  const char* env = std::getenv("LATENTLENS_THREADS");
  if (!env || !*env) return;
  Settings s;
  s.set("LATENTLENS_THREADS", env);
  const std::int64_t n = s.integer("LATENTLENS_THREADS");
  if (n < 1) throw Error(ErrorCategory::config, "LATENTLENS_THREADS must be a positive integer");
  openblas_set_num_threads(static_cast<int>(n));
}

namespace {

struct DirectionsBundle {
  LoadedModel model;
  DirectionsSidecar side;
  std::unique_ptr<DirectionMatrix> a;
  std::unique_ptr<Reconstructor> r;
};

DirectionsBundle load_bundle(const Settings& s) {
  require(s, {"checkpoint", "directions"});
  DirectionsBundle b;
  b.model = load_model(s.path("checkpoint"));
  if (!b.model.generator) throw Error(ErrorCategory::config, "checkpoint " + s.str("checkpoint") + " has no generator");
  const auto dir_path = s.path("directions");
  b.side = read_sidecar(dir_path);
  if (b.side.generator_checksum != b.model.generator->checksum()) {
    throw Error(ErrorCategory::config, "directions " + dir_path.string() + " were trained for generator " +
                                           b.side.generator_checksum + ", not " + b.model.generator->checksum());
  }
  b.a = std::make_unique<DirectionMatrix>(load_direction_matrix(dir_path));
  Rng unused(0);
  b.r = std::make_unique<Reconstructor>(
      ReconstructorArch{b.side.backbone, b.side.k, b.side.image_size, b.side.width}, unused);
  nn::load_state(*b.r, read_checkpoint(dir_path).subset("reconstructor."));
  return b;
}

std::string pad(int value, int width) {
  std::string s = std::to_string(value);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

int digits(int n) { return static_cast<int>(std::to_string(std::max(0, n - 1)).size()); }

void cmd_gen_data(const Settings& s, const CommandLog& log) {
  require(s, {"out"});
  const auto out = s.path("out");
  const int n = checked_int(s, "n", 1);
  const int size = checked_int(s, "size", 8, 1024);
  std::filesystem::create_directories(out);
  write_settings_snapshot(out / "config.json", "gen-data", s);
  const Dataset ds = generate_dataset(static_cast<std::size_t>(n), size, size, s.u64("seed"), s.flag("noise"));
  write_dataset(out / "dataset.llds", ds);
  log("wrote " + std::to_string(n) + " phantoms to " + (out / "dataset.llds").string());
}

void cmd_train(const Settings& s, const CommandLog& log) {
  require(s, {"out", "data"});
  const auto out = s.path("out");
  const Dataset ds = read_dataset(s.path("data"));
  if (ds.height != ds.width) throw Error(ErrorCategory::data, "training needs square images");
  const Split split = split_dataset(ds.count(), s.u64("split_seed"), s.real("test_fraction"));
  TrainOptions opt;
  opt.seed = s.u64("seed");
  opt.log_every = checked_int(s, "log_every", 1);
  opt.fid_samples = checked_int(s, "fid_samples", 2);
  opt.out_dir = out;
  opt.log = log;
  const int d = checked_int(s, "latent_dim", 1, 4096);
  const int channels = checked_int(s, "channels", 1, 4096);
  const int epochs = checked_int(s, "epochs", 1);
  const int batch = checked_int(s, "batch", 2);
  std::filesystem::create_directories(out);
  write_settings_snapshot(out / "config.json", "train", s);
  if (s.str("model") == "vae") {
    VaeTrainConfig config;
    config.beta = s.real("beta");
    if (!(config.beta > 0)) throw Error(ErrorCategory::config, "setting 'beta' must be positive");
    config.lr = positive(s, "lr");
    config.batch = batch;
    config.epochs = epochs;
    const VaeArch arch{d, ds.height, channels, checked_int(s, "feature_dim", 1, 4096)};
    const TrainOutcome r = train_vae(ds, split, arch, config, opt);
    log("vae selected epoch " + std::to_string(r.selected_epoch) + " fid " + std::to_string(r.selected_fid));
    return;
  }
  require(s, {"extractor"});
  const LoadedModel ext = load_model(s.path("extractor"));
  if (!ext.encoder) throw Error(ErrorCategory::config, "extractor must be a VAE checkpoint");
  GanTrainConfig config;
  config.lr = positive(s, "lr");
  config.batch = batch;
  config.epochs = epochs;
  config.sigma0 = s.real("sigma0");
  if (config.sigma0 < 0) throw Error(ErrorCategory::config, "setting 'sigma0' must be non-negative");
  const FidScorer scorer(*ext.encoder, ds, split.test);
  const TrainOutcome r = train_gan(ds, split, GanArch{d, ds.height, channels}, config, scorer, opt);
  log("gan selected epoch " + std::to_string(r.selected_epoch) + " fid " + std::to_string(r.selected_fid));
}

DirectionTrainConfig direction_config(const Settings& s) {
  DirectionTrainConfig c;
  c.alpha_max = positive(s, "alpha_max");
  if (!(c.alpha_max > c.alpha_min)) {
    throw Error(ErrorCategory::config, "setting 'alpha_max' must exceed the minimum shift " + std::to_string(c.alpha_min));
  }
  return c;
}

void cmd_discover(const Settings& s, const CommandLog& log) {
  require(s, {"out", "checkpoint"});
  const auto out = s.path("out");
  LoadedModel m = load_model(s.path("checkpoint"));
  if (!m.generator) throw Error(ErrorCategory::config, "checkpoint " + s.str("checkpoint") + " has no generator");
  const ColumnMode mode = parse_column_mode(s.str("mode"));
  const Backbone backbone = parse_backbone(s.str("reconstructor"));
  const int k = checked_int(s, "k", 1, 100000);
  DirectionTrainConfig config = direction_config(s);
  config.gamma = s.real("gamma");
  config.iters = checked_int(s, "iters", 1);
  config.batch = checked_int(s, "batch", 2);
  config.lr = positive(s, "lr");
  config.log_every = checked_int(s, "log_every", 1);
  config.check_constraints = s.flag("check_constraints");
  const int constraint_every = checked_int(s, "constraint_every", 1);
  const int width = checked_int(s, "width", 1, 1024);
  const int d = m.generator->latent_dim();
  if (mode == ColumnMode::orthonormal && k > d) {
    throw Error(ErrorCategory::config, "orthonormal directions need K <= d, got K=" + std::to_string(k) +
                                           " d=" + std::to_string(d));
  }
  std::filesystem::create_directories(out);
  write_settings_snapshot(out / "config.json", "discover", s);
  Rng root(s.u64("seed"));
  Rng init = root.fork(1);
  DirectionMatrix a(d, k, mode, init);
  Reconstructor r({backbone, k, m.generator->image_height(), width}, init);
  std::vector<MetricsRow> rows;
  std::string constraints = "iter,violation\n";
  {
    DirectionTrainer trainer(a, r, *m.generator, config, root.fork(2));
    const auto sample = [&](std::int64_t iter, const DirectionMatrix& current) {
      if (iter % constraint_every != 0 && iter != config.iters) return;
      char line[64];
      std::snprintf(line, sizeof line, "%lld,%.9g\n", static_cast<long long>(iter), current.constraint_error());
      constraints += line;
    };
    rows = trainer.run(sample, [&](const MetricsRow& row) {
      char line[160];
      std::snprintf(line, sizeof line, "iter %lld L_cl %.4f L_s %.4f RCA %.4f", static_cast<long long>(row.iter),
                    row.l_cl, row.l_s, row.rca);
      log(line);
    });
  }
  write_metrics_csv(out / "metrics.csv", rows);
  write_text_atomic(out / "constraints.csv", constraints);
  save_directions(out / "directions.llck", a, r, m.generator->checksum());
  log("wrote " + (out / "directions.llck").string());
}

ordered_json correlation_json(const std::string& name, const CorrelationRow& row) {
  ordered_json abs = ordered_json::object(), sig = ordered_json::object();
  for (std::size_t f = 0; f < kEstimateCount; ++f) {
    abs[std::string(kEstimateNames[f])] = row.mean_abs_rho[f];
    sig[std::string(kEstimateNames[f])] = row.mean_rho[f];
  }
  return {{"direction", name},
          {"best_factor", row.best_factor < 0 ? ordered_json() : ordered_json(std::string(kEstimateNames[row.best_factor]))},
          {"best_abs_rho", row.best_abs_rho},
          {"unstable", row.unstable},
          {"failure_rate", row.failure_rate},
          {"mean_abs_rho", abs},
          {"mean_rho", sig}};
}

void append_correlation_csv(std::string& csv, const std::string& name, const CorrelationRow& row) {
  const std::string best = row.best_factor < 0 ? "" : std::string(kEstimateNames[row.best_factor]);
  char line[256];
  for (std::size_t f = 0; f < kEstimateCount; ++f) {
    std::snprintf(line, sizeof line, "%s,%s,%.9g,%.9g,%s\n", name.c_str(), std::string(kEstimateNames[f]).c_str(),
                  row.mean_rho[f], row.mean_abs_rho[f], best.c_str());
    csv += line;
  }
}

double mean_best(const std::vector<CorrelationRow>& rows) {
  double sum = 0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.unstable) continue;
    sum += r.best_abs_rho;
    ++n;
  }
  return n ? sum / n : 0.0;
}

void cmd_eval(const Settings& s, const CommandLog& log) {
  require(s, {"out"});
  const auto out = s.path("out");
  DirectionsBundle b = load_bundle(s);
  const LatentGenerator& g = *b.model.generator;
  DirectionTrainConfig dconfig = direction_config(s);
  const int n_rca = checked_int(s, "n_rca", 1);
  const int n_z = checked_int(s, "n_z", 1);
  const int grid_points = checked_int(s, "grid_points", 3);
  const int interp_pairs = checked_int(s, "interp_pairs", 0);
  const int interp_frames = checked_int(s, "interp_frames", 2);
  const int search_steps = checked_int(s, "search_steps", 0);
  const double search_lr = positive(s, "search_lr");
  const int random_count = checked_int(s, "random_count", 1);
  std::filesystem::create_directories(out);
  write_settings_snapshot(out / "config.json", "eval", s);
  Rng root(s.u64("seed"));

  ordered_json report{{"model", b.model.kind == ModelKind::vae ? "vae" : "gan"},
                      {"generator_checksum", g.checksum()},
                      {"K", b.a->k()},
                      {"d", b.a->latent_dim()},
                      {"mode", to_string(b.a->mode())}};

  const RcaReport rca = rca_eval(*b.a, *b.r, g, n_rca, root.fork(1), dconfig);
  report["rca"] = {{"rca", rca.rca}, {"l_s", rca.l_s}, {"l_cl", rca.l_cl}, {"samples", rca.samples}};
  log("RCA " + std::to_string(rca.rca) + " L_s " + std::to_string(rca.l_s));

  std::optional<Dataset> ds;
  Split split;
  if (!s.str("data").empty()) {
    ds = read_dataset(s.path("data"));
    split = split_dataset(ds->count(), s.u64("split_seed"), s.real("test_fraction"));
  }
  report["fid"] = nullptr;
  if (ds && !s.str("extractor").empty()) {
    const LoadedModel ext = load_model(s.path("extractor"));
    if (!ext.encoder) throw Error(ErrorCategory::config, "extractor must be a VAE checkpoint");
    const FidScorer scorer(*ext.encoder, *ds, split.test);
    report["fid"] = scorer.score(g, checked_int(s, "fid_samples", 2), root.fork(2));
  }

  const auto grid = linspace(-dconfig.alpha_max, dconfig.alpha_max, grid_points);
  std::string csv = "direction,factor,rho,abs_rho,best_factor\n";
  std::vector<CorrelationRow> discovered;
  ordered_json rows = ordered_json::array();
  for (int k = 0; k < b.a->k(); ++k) {
    Rng rng = root.fork(3).fork(static_cast<std::uint64_t>(k));
    discovered.push_back(direction_factor_correlation(g, b.a->column(k), n_z, grid, rng));
    rows.push_back(correlation_json(std::to_string(k), discovered.back()));
    append_correlation_csv(csv, std::to_string(k), discovered.back());
  }
  report["correlation"] = rows;
  ordered_json recovered = ordered_json::array();
  for (std::size_t f = 0; f < kWellPosedFactors.size(); ++f) {
    const auto idx = static_cast<std::size_t>(
        std::find(kEstimateNames.begin(), kEstimateNames.end(), kWellPosedFactors[f]) - kEstimateNames.begin());
    double best = 0;
    for (const auto& r : discovered)
      if (!r.unstable) best = std::max(best, r.mean_abs_rho[idx]);
    recovered.push_back({{"factor", std::string(kWellPosedFactors[f])}, {"best_mean_abs_rho", best}});
  }
  report["well_posed"] = recovered;
  report["discovered_mean_best_abs_rho"] = mean_best(discovered);

  if (s.flag("random_baseline")) {
    std::vector<CorrelationRow> random;
    ordered_json rrows = ordered_json::array();
    Rng dir_rng = root.fork(4);
    for (int i = 0; i < random_count; ++i) {
      const DirectionMatrix rand(b.a->latent_dim(), 1, ColumnMode::unit, dir_rng);
      Rng rng = root.fork(5).fork(static_cast<std::uint64_t>(i));
      random.push_back(direction_factor_correlation(g, rand.column(0), n_z, grid, rng));
      rrows.push_back(correlation_json("random" + std::to_string(i), random.back()));
      append_correlation_csv(csv, "random" + std::to_string(i), random.back());
    }
    report["random_baseline"] = rrows;
    report["random_mean_best_abs_rho"] = mean_best(random);
  }
  write_text_atomic(out / "correlation.csv", csv);

  if (ds && interp_pairs > 0) {
    if (split.test.size() < static_cast<std::size_t>(2 * interp_pairs)) {
      throw Error(ErrorCategory::config, "interpolation needs " + std::to_string(2 * interp_pairs) +
                                             " holdout images, have " + std::to_string(split.test.size()));
    }
    ordered_json pairs = ordered_json::array();
    int smooth = 0;
    auto latent_of = [&](std::size_t index) {
      const std::size_t one[1] = {index};
      if (b.model.encoder) {
        NoGradGuard guard;
        return b.model.encoder->encode(ds->batch(one), false).mu.vec();
      }
      return reverse_latent_search(g, ds->image(index), search_steps, search_lr).z;
    };
    for (int p = 0; p < interp_pairs; ++p) {
      const auto za = latent_of(split.test[2 * p]), zb = latent_of(split.test[2 * p + 1]);
      const InterpolationReport r = interpolation_check(g, za, zb, interp_frames);
      smooth += r.smooth;
      pairs.push_back({{"max_delta", r.max_delta}, {"mean_delta", r.mean_delta}, {"smooth", r.smooth}});
    }
    report["interpolation"] = {{"latents", b.model.encoder ? "encoder mean" : "reverse search"},
                               {"pairs", pairs},
                               {"smooth_pairs", smooth},
                               {"all_smooth", smooth == interp_pairs}};
  }
  write_text_atomic(out / "eval.json", report.dump(2) + "\n");
  log("wrote " + (out / "eval.json").string());
}

void cmd_render(const Settings& s, const CommandLog& log) {
  require(s, {"out"});
  const auto out = s.path("out");
  DirectionsBundle b = load_bundle(s);
  const LatentGenerator& g = *b.model.generator;
  const int d = g.latent_dim(), h = g.image_height(), w = g.image_width();
  std::vector<int> ks;
  if (s.str("ks") == "all") {
    ks.resize(b.a->k());
    std::iota(ks.begin(), ks.end(), 0);
  } else {
    for (double v : s.reals("ks")) {
      if (v != std::floor(v) || v < 0 || v >= b.a->k()) {
        throw Error(ErrorCategory::config, "direction " + std::to_string(v) + " out of range for K=" +
                                               std::to_string(b.a->k()));
      }
      ks.push_back(static_cast<int>(v));
    }
  }
  auto alphas = s.reals("alphas");
  std::sort(alphas.begin(), alphas.end());
  const double alpha_max = positive(s, "alpha_max");
  for (double a : alphas)
    if (std::abs(a) > alpha_max) throw Error(ErrorCategory::config, "alpha " + std::to_string(a) + " exceeds alpha_max");
  const int n_z = checked_int(s, "n_z", 1);
  const int frames = checked_int(s, "frames", 0);
  std::filesystem::create_directories(out);
  write_settings_snapshot(out / "config.json", "render", s);

  Rng rng(s.u64("seed"));
  const Tensor z = Tensor::randn({n_z, d}, rng);
  const int na = static_cast<int>(alphas.size());
  const int kd = digits(b.a->k());
  NoGradGuard guard;
  for (int k : ks) {
    const auto col = b.a->column(k);
    std::vector<float> zs(static_cast<std::size_t>(n_z) * na * d);
    for (int i = 0; i < n_z; ++i)
      for (int j = 0; j < na; ++j)
        for (int c = 0; c < d; ++c) {
          const float base = z[i * d + c];
          zs[(static_cast<std::size_t>(i) * na + j) * d + c] =
              alphas[j] == 0 ? base : base + static_cast<float>(alphas[j]) * col[c];
        }
    const Tensor images = g.generate(Tensor({n_z * na, d}, std::move(zs)));
    write_png(out / ("grid_k" + pad(k, kd) + ".png"), tile_grid(images, n_z, na), n_z * h, na * w);
    if (frames > 0) {
      const auto sweep = frames == 1 ? std::vector<double>{0.0} : linspace(-alpha_max, alpha_max, frames);
      std::vector<float> fz(static_cast<std::size_t>(frames) * d);
      for (int f = 0; f < frames; ++f)
        for (int c = 0; c < d; ++c) fz[f * d + c] = z[c] + static_cast<float>(sweep[f]) * col[c];
      const Tensor seq = g.generate(Tensor({frames, d}, std::move(fz)));
      const auto dir = out / "frames" / ("k" + pad(k, kd));
      const int fd = digits(frames);
      for (int f = 0; f < frames; ++f) {
        write_png(dir / ("frame_" + pad(f, std::max(3, fd)) + ".png"),
                  seq.data().subspan(static_cast<std::size_t>(f) * h * w, static_cast<std::size_t>(h) * w), h, w);
      }
    }
  }
  log("rendered " + std::to_string(ks.size()) + " directions to " + out.string());
}

void cmd_serve(const Settings& s, const CommandLog& log) {
  DirectionsBundle b = load_bundle(s);
  ServiceOptions opt;
  opt.alpha_max = positive(s, "alpha_max");
  opt.label_path = s.path("labels");
  opt.seed = s.u64("seed");
  if (!s.str("report").empty()) {
    const auto bytes = read_file(s.path("report"));
    try {
      const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
      for (const auto& row : j.at("correlation")) opt.mean_abs_rho.push_back(row.at("best_abs_rho").get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::format, "eval report " + s.str("report") + ": " + e.what());
    }
  }
  Service service(*b.model.generator, *b.a, opt);
  const int port = checked_int(s, "port", 1, 65535);
  log("serving on http://" + s.str("host") + ":" + std::to_string(port));
  run_service(service, s.str("host"), port);
}

}  // namespace

void run_command(const std::string& command, const Settings& settings, const CommandLog& log) {
  const CommandLog sink = log ? log : [](const std::string&) {};
  if (command == "gen-data") return cmd_gen_data(settings, sink);
  if (command == "train") return cmd_train(settings, sink);
  if (command == "discover") return cmd_discover(settings, sink);
  if (command == "eval") return cmd_eval(settings, sink);
  if (command == "render") return cmd_render(settings, sink);
  if (command == "serve") return cmd_serve(settings, sink);
  throw Error(ErrorCategory::config, "unknown command '" + command + "'");
}

}  // namespace latentlens
