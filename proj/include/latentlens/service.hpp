#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <future>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "latentlens/directions.hpp"
#include "latentlens/generator.hpp"

namespace httplib {
class Server;
}

namespace latentlens {

struct DirectionLabel {
  int k = 0;
  std::string label;
  std::string confidence = "medium";  // low | medium | high
  std::string ts;                     // UTC, ISO 8601
  std::string annotator = "anonymous";
};

bool valid_confidence(const std::string& c);

/// JSON-lines label file. Appends go through one writer thread; each write
/// replaces the file atomically with all persisted lines plus the new one.
class LabelStore {
 public:
  /// Loads existing lines; a malformed line is a format error.
  explicit LabelStore(std::filesystem::path path);
  ~LabelStore();
  LabelStore(const LabelStore&) = delete;
  LabelStore& operator=(const LabelStore&) = delete;

  /// Resolves once the label is on disk.
  std::future<void> append(DirectionLabel label);
  std::vector<DirectionLabel> all() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  struct Pending {
    DirectionLabel label;
    std::promise<void> done;
  };
  void writer_loop();

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::condition_variable wake_;
  std::deque<Pending> queue_;
  std::vector<DirectionLabel> labels_;
  std::string contents_;
  bool stopping_ = false;
  std::thread writer_;
};

std::string label_to_json(const DirectionLabel& l);
DirectionLabel label_from_json(const std::string& line);

struct ServiceOptions {
  double alpha_max = 6.0;
  std::filesystem::path label_path = "labels.jsonl";
  std::uint64_t seed = 0;              // session latents and ids
  std::vector<double> mean_abs_rho;    // per direction, from an eval report; may be empty
};

/// HTTP API over a frozen generator and direction matrix.
class Service {
 public:
  Service(const LatentGenerator& g, const DirectionMatrix& a, ServiceOptions options);

  void install(httplib::Server& server);

  /// PNG of G(z + alpha A e_k); alpha = 0 renders G(z) unshifted.
  std::vector<std::uint8_t> render(const std::vector<double>& z, int k, double alpha) const;

  int k() const { return a_.k(); }
  int latent_dim() const { return g_.latent_dim(); }
  const LabelStore& labels() const { return labels_; }

 private:
  std::string new_session(std::vector<double>& z);

  const LatentGenerator& g_;
  const DirectionMatrix& a_;
  ServiceOptions options_;
  std::string model_checksum_;
  std::chrono::steady_clock::time_point started_;
  LabelStore labels_;
  mutable std::mutex render_mutex_;
  std::mutex session_mutex_;
  Rng rng_;
  std::unordered_map<std::string, std::vector<double>> sessions_;
};

/// Blocks serving on host:port until the server is stopped.
void run_service(Service& service, const std::string& host, int port);

}  // namespace latentlens
