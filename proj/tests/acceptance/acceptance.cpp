#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "latentlens/binio.hpp"
#include "latentlens/checkpoint.hpp"
#include "latentlens/commands.hpp"
#include "latentlens/dataset.hpp"
#include "latentlens/directions.hpp"
#include "latentlens/eval.hpp"
#include "latentlens/pipeline.hpp"
#include "latentlens/runtime.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace latentlens;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;
const Clock::time_point kStart = Clock::now();

void progress(const std::string& line) {
  const double t = std::chrono::duration<double>(Clock::now() - kStart).count();
  std::fprintf(stderr, "[%7.1fs] %s\n", t, line.c_str());
  std::fflush(stderr);
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::optional<Verdict> verdict;
};

using Kv = std::map<std::string, std::string>;

// Runs one command with the CLI binary in a child process. With reuse, a
// stage whose marker records identical resolved settings is skipped.
void stage(const std::string& command, Kv kv, const fs::path& out, bool reuse) {
  kv["out"] = out.string();
  const Settings s = resolve_settings(command, Settings{}, Settings(kv));
  const std::string marker_text = json(s.values()).dump();
  const fs::path marker = out / ".acceptance_done";
  if (reuse && fs::exists(marker)) {
    std::ifstream in(marker);
    std::stringstream buf;
    buf << in.rdbuf();
    if (buf.str() == marker_text) {
      progress(command + " " + out.string() + ": reused");
      return;
    }
  }
  fs::remove(marker);
  progress(command + " " + out.string());
  std::string line = std::string("'") + LATENTLENS_CLI + "' " + command;
  for (const auto& [k, v] : kv) line += " --set '" + k + "=" + v + "'";
  const int status = std::system(line.c_str());
  if (status != 0) {
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    throw std::runtime_error(command + " " + out.string() + " exited with status " + std::to_string(code));
  }
  write_text_atomic(marker, marker_text);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
  return json::parse(in);
}

std::vector<std::vector<double>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

// Desk-scale work plan.
struct Plan {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path dataset() const { return data() / "dataset.llds"; }
  fs::path vae() const { return root / "vae"; }
  fs::path gan() const { return root / "gan"; }
  fs::path vae_dirs() const { return root / "vae_dirs"; }
  fs::path vae_ortho() const { return root / "vae_ortho"; }
  fs::path gan_dirs() const { return root / "gan_dirs"; }
  fs::path vae_eval() const { return root / "vae_eval"; }
  fs::path gan_eval() const { return root / "gan_eval"; }
};

constexpr std::uint64_t kDataSeed = 1, kVaeSeed = 2, kGanSeed = 3;
constexpr int kDeskPhantoms = 10000;
constexpr int kK = 32;
constexpr int kDirectionIters = 6000;

// ---------------------------------------------------------------------------

Verdict check_gradients() {
  constexpr int kShapes = 20;
  constexpr double kTol = 1e-5, kBudget = 120.0;
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0;
  std::string worst_op, failures;
  std::size_t checked = 0;
  const auto cases = testsupport::all_op_cases();
  for (const auto& op : cases) {
    for (int trial = 0; trial < kShapes; ++trial) {
      auto [inputs, fn] = op.make(rng);
      const auto r = testsupport::grad_check(fn, std::move(inputs), rng);
      checked += r.checked;
      if (!(r.max_rel_err < kTol) && failures.find(op.name) == std::string::npos) failures += " " + op.name;
      if (!(r.max_rel_err <= worst)) {
        worst = r.max_rel_err;
        worst_op = op.name;
      }
    }
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  Verdict v;
  v.pass = failures.empty() && secs < kBudget;
  v.detail = std::to_string(cases.size()) + " ops x " + std::to_string(kShapes) + " shapes, " +
             std::to_string(checked) + " coordinates, max rel err " + num(worst) + " (" + worst_op + ") < 1e-05, " +
             num(secs, 3) + " s < 120 s";
  if (!failures.empty()) v.detail += "; over tolerance:" + failures;
  return v;
}

Verdict check_zero_shift(const Plan& p) {
  constexpr int kPairs = 100;
  std::string detail;
  bool pass = true;
  const std::pair<fs::path, fs::path> models[] = {{p.vae() / "vae.llck", p.vae_dirs() / "directions.llck"},
                                                  {p.gan() / "gan.llck", p.gan_dirs() / "directions.llck"}};
  for (const auto& [model_path, dirs_path] : models) {
    const LoadedModel m = load_model(model_path);
    const DirectionMatrix a = load_direction_matrix(dirs_path);
    const LatentGenerator& g = *m.generator;
    NoGradGuard guard;
    Rng rng(77);
    const Tensor z = Tensor::randn({kPairs, g.latent_dim()}, rng);
    std::vector<int> ks(kPairs);
    for (auto& k : ks) k = static_cast<int>(rng.below(static_cast<std::uint64_t>(a.k())));
    const std::vector<float> zeros(kPairs, 0.0f);
    const Tensor base = g.generate(z);
    const Tensor moved = g.generate(a.shift(z, ks, zeros));
    int equal = 0;
    const std::size_t per = base.numel() / kPairs;
    for (int i = 0; i < kPairs; ++i) {
      equal += std::memcmp(base.data().data() + i * per, moved.data().data() + i * per, per * sizeof(float)) == 0;
    }
    pass = pass && equal == kPairs;
    detail += (detail.empty() ? "" : ", ") + model_path.stem().string() + " " + std::to_string(equal) + "/" +
              std::to_string(kPairs) + " bit-identical";
  }
  return {pass, detail};
}

Verdict check_constraints(const Plan& p) {
  struct Run {
    fs::path dir;
    const char* mode;
    double tol;
  };
  const Run runs[] = {{p.vae_dirs(), "unit", 1e-5}, {p.vae_ortho(), "orthonormal", 1e-4}};
  bool pass = true;
  std::string detail;
  for (const auto& run : runs) {
    const auto rows = read_csv(run.dir / "constraints.csv");
    double worst = 0;
    std::int64_t last = 0;
    for (const auto& r : rows) {
      worst = std::max(worst, r.at(1));
      last = static_cast<std::int64_t>(r.at(0));
    }
    const DirectionMatrix a = load_direction_matrix(run.dir / "directions.llck");
    const double final_err = a.constraint_error();
    const bool ok = rows.size() == kDirectionIters / 50 && last == kDirectionIters && worst < run.tol &&
                    final_err < run.tol && a.mode() == parse_column_mode(run.mode);
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + std::string(run.mode) + ": " + std::to_string(rows.size()) +
              " samples over " + std::to_string(last) + " steps, max " + num(worst) + " < " + num(run.tol) +
              ", saved " + num(final_err);
  }
  return {pass, detail};
}

Verdict check_chance(const Plan& p) {
  constexpr std::int64_t kSamples = 10000;
  const LoadedModel m = load_model(p.vae() / "vae.llck");
  Rng rng(4242);
  const DirectionMatrix a(m.generator->latent_dim(), kK, ColumnMode::unit, rng);
  const Reconstructor r(ReconstructorArch{Backbone::lenet, kK, m.generator->image_height(), 16}, rng);
  const RcaReport rep = rca_eval(a, r, *m.generator, kSamples, Rng(4343));
  const double chance = 1.0 / kK, ln_k = std::log(static_cast<double>(kK));
  Verdict v;
  v.pass = std::abs(rep.rca - chance) <= 0.02 && std::abs(rep.l_cl - ln_k) <= 0.3 && rep.samples == kSamples;
  v.detail = "n=" + std::to_string(rep.samples) + ", RCA " + num(rep.rca) + " vs 1/K=" + num(chance) +
             " +/-0.02, L_cl " + num(rep.l_cl) + " vs ln K=" + num(ln_k) + " +/-0.3 (L_s " + num(rep.l_s) + ")";
  return v;
}

Verdict check_learning(const Plan& p) {
  const json vae = read_json(p.vae_eval() / "eval.json");
  const json gan = read_json(p.gan_eval() / "eval.json");
  const double vae_rca = vae["rca"]["rca"], vae_ls = vae["rca"]["l_s"], gan_rca = gan["rca"]["rca"];
  const bool vae_ok = vae_rca >= 0.80 && vae_ls <= 1.0;
  const bool gan_ok = gan_rca >= 0.60;
  const bool order_ok = vae_rca > gan_rca;
  Verdict v;
  v.pass = vae_ok && gan_ok && order_ok;
  v.detail = "VAE RCA " + num(vae_rca) + " >= 0.8 and L_s " + num(vae_ls) + " <= 1 [" + (vae_ok ? "ok" : "no") +
             "], GAN RCA " + num(gan_rca) + " >= 0.6 [" + (gan_ok ? "ok" : "no") + "], VAE > GAN [" +
             (order_ok ? "ok" : "no") + "]";
  return v;
}

Verdict check_semantics(const Plan& p) {
  const json vae = read_json(p.vae_eval() / "eval.json");
  int recovered = 0;
  std::string per;
  for (const auto& f : vae["well_posed"]) {
    const double best = f["best_mean_abs_rho"];
    recovered += best >= 0.6;
    per += (per.empty() ? "" : " ") + f["factor"].get<std::string>() + "=" + num(best, 3);
  }
  const double discovered = vae["discovered_mean_best_abs_rho"];
  const double random = vae["random_mean_best_abs_rho"];
  const int random_count = static_cast<int>(vae["random_baseline"].size());
  Verdict v;
  v.pass = recovered >= 3 && discovered > random && random_count == 10;
  v.detail = std::to_string(recovered) + "/5 factors with mean |rho| >= 0.6 (" + per + "), discovered " +
             num(discovered) + " vs " + std::to_string(random_count) + " random " + num(random) +
             " mean best |rho| [" + (discovered > random ? "ok" : "no") + "]";
  return v;
}

FeatureStats random_stats(Rng& rng, int dim) {
  Eigen::MatrixXd x(3 * dim + 4, dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = rng.normal() * (1.0 + 0.3 * static_cast<double>(j));
  return feature_stats(x);
}

FeatureStats gaussian_1d(double mean, double sd) {
  FeatureStats s;
  s.mean = Eigen::VectorXd::Constant(1, mean);
  s.cov = Eigen::MatrixXd::Constant(1, 1, sd * sd);
  s.count = 2;
  return s;
}

Verdict check_frechet_math() {
  Rng rng(9);
  bool zero_ok = true;
  for (int dim : {1, 4, 16, 64}) {
    const FeatureStats a = random_stats(rng, dim);
    zero_ok = zero_ok && frechet_distance(a, a) == 0.0;
  }
  double closed_err = 0;
  const double cases[][4] = {{0, 1, 0, 1}, {0, 1, 3, 1}, {1.5, 2, -0.5, 0.5}, {2, 0, 0, 3}, {-1, 4, 2, 0.25}};
  for (const auto& c : cases) {
    const double expect = (c[0] - c[2]) * (c[0] - c[2]) + (c[1] - c[3]) * (c[1] - c[3]);
    closed_err = std::max(closed_err, std::abs(frechet_distance(gaussian_1d(c[0], c[1]), gaussian_1d(c[2], c[3])) - expect));
  }
  double asym = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int dim = 2 + trial;
    const FeatureStats a = random_stats(rng, dim), b = random_stats(rng, dim);
    asym = std::max(asym, std::abs(frechet_distance(a, b) - frechet_distance(b, a)));
  }
  Verdict v;
  v.pass = zero_ok && closed_err < 1e-9 && asym < 1e-6;
  v.detail = std::string("d(a,a)=0 ") + (zero_ok ? "exact" : "NOT exact") + ", 1-D closed form err " + num(closed_err) +
             " < 1e-9, asymmetry " + num(asym) + " < 1e-6";
  return v;
}

// Re-scores the saved checkpoint with the training scorer and compares it
// with the epoch-1 row of the FID log.
Verdict check_selection(const Plan& p) {
  const Dataset ds = read_dataset(p.dataset());
  const Split split = split_dataset(ds.count(), 0, 0.1);
  const LoadedModel ext = load_model(p.vae() / "extractor.llck");
  const FidScorer scorer(*ext.encoder, ds, split.test);
  struct Item {
    const char* name;
    fs::path ckpt, csv;
    std::uint64_t seed, fork;
  };
  const Item items[] = {{"vae", p.vae() / "vae.llck", p.vae() / "vae_fid.csv", kVaeSeed, 4},
                        {"gan", p.gan() / "gan.llck", p.gan() / "gan_fid.csv", kGanSeed, 14}};
  bool pass = true;
  std::string detail;
  for (const auto& it : items) {
    const auto rows = read_csv(it.csv);
    double epoch1 = NAN, logged_min = INFINITY;
    for (const auto& r : rows) {
      if (r.at(0) == 1) epoch1 = r.at(1);
      logged_min = std::min(logged_min, r.at(1));
    }
    const LoadedModel m = load_model(it.ckpt);
    const double rescored = scorer.score(*m.generator, 500, Rng(it.seed).fork(it.fork));
    const bool matches = std::abs(rescored - logged_min) <= 1e-6 * std::max(1.0, logged_min);
    const bool ok = matches && rescored <= epoch1;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + std::string(it.name) + " selected FID " + num(rescored) +
              (matches ? "" : " (log min " + num(logged_min) + ")") + " <= epoch-1 " + num(epoch1);
  }
  return {pass, detail};
}

Verdict check_interpolation(const Plan& p) {
  const json vae = read_json(p.vae_eval() / "eval.json");
  const json& interp = vae["interpolation"];
  double worst_ratio = 0;
  for (const auto& pair : interp["pairs"]) {
    const double mean = pair["mean_delta"], max = pair["max_delta"];
    worst_ratio = std::max(worst_ratio, mean > 0 ? max / mean : INFINITY);
  }
  const int pairs = static_cast<int>(interp["pairs"].size());
  const int smooth = interp["smooth_pairs"];
  Verdict v;
  v.pass = pairs == 10 && smooth == pairs && worst_ratio <= 3.0;
  v.detail = std::to_string(smooth) + "/" + std::to_string(pairs) + " encoded holdout pairs smooth, worst max/mean " +
             num(worst_ratio) + " <= 3";
  return v;
}

void run_mini_pipeline(const fs::path& root) {
  fs::remove_all(root);
  const std::string data = (root / "data" / "dataset.llds").string();
  const std::string vae = (root / "vae" / "vae.llck").string();
  const std::string extractor = (root / "vae" / "extractor.llck").string();
  const std::string gan = (root / "gan" / "gan.llck").string();
  stage("gen-data", {{"seed", "11"}, {"n", "600"}, {"size", "32"}}, root / "data", false);
  stage("train",
        {{"seed", "12"}, {"data", data}, {"model", "vae"}, {"epochs", "2"}, {"channels", "4"}, {"batch", "32"},
         {"fid_samples", "100"}},
        root / "vae", false);
  stage("train",
        {{"seed", "13"}, {"data", data}, {"model", "gan"}, {"epochs", "2"}, {"channels", "16"}, {"batch", "32"},
         {"extractor", extractor}, {"fid_samples", "100"}},
        root / "gan", false);
  stage("discover", {{"seed", "14"}, {"checkpoint", vae}, {"iters", "200"}, {"log_every", "50"}}, root / "vae_dirs",
        false);
  stage("discover", {{"seed", "15"}, {"checkpoint", gan}, {"iters", "200"}, {"log_every", "50"}}, root / "gan_dirs",
        false);
  stage("eval",
        {{"seed", "16"}, {"checkpoint", vae}, {"directions", (root / "vae_dirs" / "directions.llck").string()},
         {"data", data}, {"extractor", extractor}, {"n_rca", "500"}, {"n_z", "4"}, {"grid_points", "5"},
         {"random_baseline", "true"}, {"random_count", "2"}, {"interp_pairs", "2"}, {"fid_samples", "100"}},
        root / "vae_eval", false);
}

Verdict check_reproducibility(const Plan& p) {
  const fs::path a = p.root / "repro" / "run_a", b = p.root / "repro" / "run_b";
  run_mini_pipeline(a);
  run_mini_pipeline(b);
  int compared = 0, differing = 0, checkpoints = 0;
  std::string first_diff;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    const std::string ext = rel.extension().string();
    bool same = false;
    if (ext == ".csv" || (ext == ".json" && rel.filename() != "config.json")) {
      same = fs::exists(b / rel) && read_file(entry.path()) == read_file(b / rel);
    } else if (ext == ".llck") {
      same = fs::exists(b / rel) &&
             checkpoint_checksum(read_checkpoint(entry.path())) == checkpoint_checksum(read_checkpoint(b / rel));
      ++checkpoints;
    } else {
      continue;
    }
    ++compared;
    if (!same) {
      ++differing;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  Verdict v;
  v.pass = differing == 0 && checkpoints >= 5 && compared > checkpoints;
  v.detail = std::to_string(compared) + " artifacts compared (" + std::to_string(checkpoints) +
             " checkpoint checksums), " + std::to_string(differing) + " differ" +
             (first_diff.empty() ? "" : ", first " + first_diff);
  return v;
}

Verdict check_formats(const Plan* p) {
  bool pass = true;
  std::string detail;
  {
    const Dataset ds = generate_dataset(64, 32, 32, 5);
    const auto bytes = encode_dataset(ds);
    const bool ok = decode_dataset(bytes) == ds && encode_dataset(decode_dataset(bytes)) == bytes;
    pass = pass && ok;
    detail += std::string("LLDS round trip ") + (ok ? "exact" : "MISMATCH");
  }
  {
    Rng rng(6);
    ModelCheckpoint c;
    c.add("w", Tensor::randn({7, 5}, rng));
    c.add("b", Tensor::randn({5}, rng));
    c.add("s", Tensor::scalar(-0.0f));
    const auto bytes = encode_checkpoint(c);
    const ModelCheckpoint back = decode_checkpoint(bytes);
    const bool ok = encode_checkpoint(back) == bytes && checkpoint_checksum(back) == checkpoint_checksum(c);
    pass = pass && ok;
    detail += std::string(", LLCK round trip ") + (ok ? "exact" : "MISMATCH");
  }
  if (p) {
    const auto ds_bytes = read_file(p->dataset());
    const auto ck_bytes = read_file(p->vae() / "vae.llck");
    const bool ok = encode_dataset(decode_dataset(ds_bytes)) == ds_bytes &&
                    encode_checkpoint(decode_checkpoint(ck_bytes)) == ck_bytes;
    pass = pass && ok;
    detail += std::string(", desk files ") + (ok ? "exact" : "MISMATCH");
  }
  int rejected = 0, total = 0;
  std::string wrong;
  auto expect = [&](const testsupport::CorruptFixture& f, auto decode) {
    ++total;
    try {
      decode(f.bytes);
    } catch (const Error& e) {
      if (e.category() == f.category && std::string(e.what()).find(f.message) != std::string::npos) {
        ++rejected;
        return;
      }
    } catch (...) {
    }
    wrong += " " + f.name;
  };
  for (const auto& f : testsupport::dataset_fixtures())
    expect(f, [](const std::vector<std::uint8_t>& b) { decode_dataset(b); });
  for (const auto& f : testsupport::checkpoint_fixtures())
    expect(f, [](const std::vector<std::uint8_t>& b) { decode_checkpoint(b); });
  pass = pass && rejected == total;
  detail += ", " + std::to_string(rejected) + "/" + std::to_string(total) + " corrupt headers rejected as documented";
  if (!wrong.empty()) detail += " (wrong:" + wrong + ")";
  return {pass, detail};
}

void run_desk_pipeline(const Plan& p, bool reuse) {
  const std::string data = p.dataset().string();
  const std::string vae = (p.vae() / "vae.llck").string();
  const std::string extractor = (p.vae() / "extractor.llck").string();
  const std::string gan = (p.gan() / "gan.llck").string();
  const std::string k = std::to_string(kK), iters = std::to_string(kDirectionIters);
  stage("gen-data", {{"seed", std::to_string(kDataSeed)}, {"n", std::to_string(kDeskPhantoms)}, {"size", "32"}},
        p.data(), reuse);
  stage("train", {{"seed", std::to_string(kVaeSeed)}, {"data", data}, {"model", "vae"}}, p.vae(), reuse);
  stage("train", {{"seed", std::to_string(kGanSeed)}, {"data", data}, {"model", "gan"}, {"extractor", extractor}},
        p.gan(), reuse);
  stage("discover",
        {{"seed", "4"}, {"checkpoint", vae}, {"k", k}, {"mode", "unit"}, {"reconstructor", "lenet"}, {"iters", iters}},
        p.vae_dirs(), reuse);
  stage("discover",
        {{"seed", "5"}, {"checkpoint", vae}, {"k", k}, {"mode", "orthonormal"}, {"reconstructor", "lenet"},
         {"iters", iters}},
        p.vae_ortho(), reuse);
  stage("discover", {{"seed", "6"}, {"checkpoint", gan}, {"k", k}, {"mode", "unit"}, {"reconstructor", "lenet"}},
        p.gan_dirs(), reuse);
  stage("eval",
        {{"seed", "7"}, {"checkpoint", vae}, {"directions", (p.vae_dirs() / "directions.llck").string()},
         {"data", data}, {"extractor", extractor}, {"n_rca", "10000"}, {"random_baseline", "true"},
         {"random_count", "10"}, {"interp_pairs", "10"}},
        p.vae_eval(), reuse);
  stage("eval",
        {{"seed", "8"}, {"checkpoint", gan}, {"directions", (p.gan_dirs() / "directions.llck").string()},
         {"data", data}, {"extractor", extractor}, {"n_rca", "10000"}, {"random_baseline", "true"},
         {"random_count", "10"}, {"interp_pairs", "10"}},
        p.gan_eval(), reuse);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  apply_thread_limit();
  CLI::App app{"latentlens acceptance checks"};
  std::string work = "acceptance_work";
  bool reuse = false, quick = false;
  app.add_option("--work", work, "working directory for pipeline artifacts");
  app.add_flag("--reuse", reuse, "skip pipeline stages already completed with identical settings");
  app.add_flag("--quick", quick, "only the checks that need no trained models");
  CLI11_PARSE(app, argc, argv);

  const Plan plan{fs::absolute(work)};
  std::vector<Criterion> criteria = {
      {1, "gradient check"},          {2, "zero-shift identity"},       {3, "column constraints"},
      {4, "untrained chance levels"}, {5, "direction learning"},        {6, "semantic recovery"},
      {7, "Frechet distance"},        {8, "holdout interpolation"},     {9, "reproducibility"},
      {10, "file formats"},
  };
  auto judge = [&](int id, const std::function<Verdict()>& fn) {
    auto& c = criteria[static_cast<std::size_t>(id - 1)];
    progress("checking " + std::to_string(id) + " " + c.name);
    try {
      c.verdict = fn();
    } catch (const std::exception& e) {
      c.verdict = Verdict{false, std::string("error: ") + e.what()};
    }
    progress(std::string(c.verdict->pass ? "PASS " : "FAIL ") + std::to_string(id) + ": " + c.verdict->detail);
  };

  judge(1, check_gradients);
  const Verdict frechet_math = check_frechet_math();
  progress(std::string("Frechet closed forms: ") + (frechet_math.pass ? "ok, " : "FAILED, ") + frechet_math.detail);
  if (!quick) {
    judge(9, [&] { return check_reproducibility(plan); });
    std::string pipeline_error;
    try {
      run_desk_pipeline(plan, reuse);
    } catch (const std::exception& e) {
      pipeline_error = e.what();
      progress("pipeline failed: " + pipeline_error);
    }
    auto needs_pipeline = [&](int id, const std::function<Verdict()>& fn) {
      if (!pipeline_error.empty()) {
        criteria[static_cast<std::size_t>(id - 1)].verdict = Verdict{false, "pipeline failed: " + pipeline_error};
        return;
      }
      judge(id, fn);
    };
    needs_pipeline(2, [&] { return check_zero_shift(plan); });
    needs_pipeline(3, [&] { return check_constraints(plan); });
    needs_pipeline(4, [&] { return check_chance(plan); });
    needs_pipeline(5, [&] { return check_learning(plan); });
    needs_pipeline(6, [&] { return check_semantics(plan); });
    needs_pipeline(7, [&] {
      const Verdict sel = check_selection(plan);
      return Verdict{frechet_math.pass && sel.pass, frechet_math.detail + "; " + sel.detail};
    });
    needs_pipeline(8, [&] { return check_interpolation(plan); });
    needs_pipeline(10, [&] { return check_formats(&plan); });
  } else {
    judge(10, [] { return check_formats(nullptr); });
  }

  int failed = 0;
  for (const auto& c : criteria) {
    if (!c.verdict) {
      std::printf("SKIP criterion %d (%s): --quick\n", c.id, c.name.c_str());
      continue;
    }
    failed += !c.verdict->pass;
    std::printf("%s criterion %d (%s): %s\n", c.verdict->pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                c.verdict->detail.c_str());
  }
  std::fflush(stdout);
  return failed == 0 ? 0 : 1;
}
