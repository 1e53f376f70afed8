#include "latentlens/service.hpp"

#include <httplib.h>

#include <cmath>
#include <ctime>
#include <json.hpp>
#include <sstream>

#include "latentlens/binio.hpp"
#include "latentlens/error.hpp"
#include "latentlens/png.hpp"

namespace latentlens {

using nlohmann::json;

bool valid_confidence(const std::string& c) { return c == "low" || c == "medium" || c == "high"; }

std::string label_to_json(const DirectionLabel& l) {
  return json{{"k", l.k}, {"label", l.label}, {"confidence", l.confidence}, {"ts", l.ts}, {"annotator", l.annotator}}
      .dump();
}

DirectionLabel label_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    DirectionLabel l;
    l.k = j.at("k").get<int>();
    l.label = j.at("label").get<std::string>();
    l.confidence = j.at("confidence").get<std::string>();
    l.ts = j.at("ts").get<std::string>();
    l.annotator = j.at("annotator").get<std::string>();
    return l;
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, std::string("label line: ") + e.what());
  }
}

LabelStore::LabelStore(std::filesystem::path path) : path_(std::move(path)) {
  if (std::filesystem::exists(path_)) {
    const auto bytes = read_file(path_);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (line.empty()) continue;
      try {
        labels_.push_back(label_from_json(line));
      } catch (const Error& e) {
        throw Error(ErrorCategory::format, path_.string() + ":" + std::to_string(number) + ": " + e.what());
      }
      contents_ += line + "\n";
    }
  }
  writer_ = std::thread([this] { writer_loop(); });
}

LabelStore::~LabelStore() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  wake_.notify_all();
  writer_.join();
}

std::future<void> LabelStore::append(DirectionLabel label) {
  std::future<void> done;
  {
    std::lock_guard lock(mutex_);
    queue_.push_back({std::move(label), {}});
    done = queue_.back().done.get_future();
  }
  wake_.notify_one();
  return done;
}

std::vector<DirectionLabel> LabelStore::all() const {
  std::lock_guard lock(mutex_);
  return labels_;
}

void LabelStore::writer_loop() {
  std::unique_lock lock(mutex_);
  for (;;) {
    wake_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
    if (queue_.empty()) return;
    Pending item = std::move(queue_.front());
    queue_.pop_front();
    const std::string next = contents_ + label_to_json(item.label) + "\n";
    lock.unlock();
    try {
      write_text_atomic(path_, next);
      lock.lock();
      contents_ = next;
      labels_.push_back(item.label);
      item.done.set_value();
    } catch (...) {
      if (!lock.owns_lock()) lock.lock();
      item.done.set_exception(std::current_exception());
    }
  }
}

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", message}}.dump(), "application/json");
}

void reply_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json label_json(const DirectionLabel& l) { return json::parse(label_to_json(l)); }

// Strict integer/float parsing of query values.
bool parse_int(const std::string& s, long long& out) {
  std::size_t used = 0;
  try {
    out = std::stoll(s, &used);
  } catch (...) {
    return false;
  }
  return used == s.size();
}

bool parse_double(const std::string& s, double& out) {
  std::size_t used = 0;
  try {
    out = std::stod(s, &used);
  } catch (...) {
    return false;
  }
  return used == s.size() && std::isfinite(out);
}

}  // namespace

Service::Service(const LatentGenerator& g, const DirectionMatrix& a, ServiceOptions options)
    : g_(g),
      a_(a),
      options_(std::move(options)),
      model_checksum_(g.checksum()),
      started_(std::chrono::steady_clock::now()),
      labels_(options_.label_path),
      rng_(options_.seed) {
  if (a.latent_dim() != g.latent_dim()) {
    throw Error(ErrorCategory::config, "service: directions have d=" + std::to_string(a.latent_dim()) +
                                           " but the generator expects " + std::to_string(g.latent_dim()));
  }
  if (!(options_.alpha_max > 0)) throw Error(ErrorCategory::config, "service: alpha_max must be positive");
  if (!options_.mean_abs_rho.empty() && static_cast<int>(options_.mean_abs_rho.size()) != a.k()) {
    throw Error(ErrorCategory::config, "service: eval report covers " + std::to_string(options_.mean_abs_rho.size()) +
                                           " directions, expected " + std::to_string(a.k()));
  }
}

std::vector<std::uint8_t> Service::render(const std::vector<double>& z, int k, double alpha) const {
  const int d = g_.latent_dim();
  std::vector<float> zf(z.begin(), z.end());
  if (alpha != 0.0) {
    const std::vector<float> col = a_.column(k);
    for (int j = 0; j < d; ++j) zf[j] += static_cast<float>(alpha) * col[j];
  }
  std::lock_guard lock(render_mutex_);
  NoGradGuard guard;
  const Tensor img = g_.generate(Tensor({1, d}, std::move(zf)));
  return encode_png(img.data(), g_.image_height(), g_.image_width());
}

std::string Service::new_session(std::vector<double>& z) {
  std::lock_guard lock(session_mutex_);
  if (z.empty()) {
    z.resize(g_.latent_dim());
    for (auto& v : z) v = static_cast<float>(rng_.normal());
  }
  std::string id;
  do {
    id = hex64(rng_.next_u64());
  } while (sessions_.contains(id));
  sessions_[id] = z;
  return id;
}

void Service::install(httplib::Server& server) {
  server.Post("/session", [this](const httplib::Request& req, httplib::Response& res) {
    std::vector<double> z;
    if (!req.body.empty()) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception&) {
        return reply_error(res, 400, "body is not valid JSON");
      }
      if (body.contains("z")) {
        const json& jz = body["z"];
        if (!jz.is_array() || static_cast<int>(jz.size()) != g_.latent_dim()) {
          return reply_error(res, 400, "z must be an array of " + std::to_string(g_.latent_dim()) + " numbers");
        }
        for (const auto& v : jz) {
          if (!v.is_number() || !std::isfinite(v.get<double>())) {
            return reply_error(res, 400, "z entries must be finite numbers");
          }
          z.push_back(v.get<double>());
        }
      }
    }
    const std::string id = new_session(z);
    reply_json(res, {{"session_id", id}, {"z", z}});
  });

  server.Get("/image", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.has_param("session")) return reply_error(res, 400, "missing session");
    std::vector<double> z;
    {
      std::lock_guard lock(session_mutex_);
      const auto it = sessions_.find(req.get_param_value("session"));
      if (it == sessions_.end()) return reply_error(res, 404, "unknown session");
      z = it->second;
    }
    long long k = 0;
    double alpha = 0;
    if (req.has_param("alpha") && !parse_double(req.get_param_value("alpha"), alpha)) {
      return reply_error(res, 400, "alpha must be a finite number");
    }
    if (req.has_param("k")) {
      if (!parse_int(req.get_param_value("k"), k)) return reply_error(res, 400, "k must be an integer");
      if (k < 0 || k >= a_.k()) return reply_error(res, 404, "no direction " + std::to_string(k));
    } else if (alpha != 0) {
      return reply_error(res, 400, "alpha given without k");
    }
    if (std::abs(alpha) > options_.alpha_max) {
      return reply_error(res, 422, "|alpha| exceeds alpha_max " + std::to_string(options_.alpha_max));
    }
    const auto png = render(z, static_cast<int>(k), alpha);
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  });

  server.Get("/directions", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    const auto all = labels_.all();
    for (int k = 0; k < a_.k(); ++k) {
      json labels = json::array();
      for (const auto& l : all)
        if (l.k == k) labels.push_back(label_json(l));
      json entry{{"k", k}, {"labels", labels}};
      if (!options_.mean_abs_rho.empty()) entry["mean_abs_rho"] = options_.mean_abs_rho[k];
      out.push_back(entry);
    }
    reply_json(res, out);
  });

  server.Put(R"(/labels/(-?\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    long long k = 0;
    if (!parse_int(req.matches[1].str(), k) || k < 0 || k >= a_.k()) {
      return reply_error(res, 404, "no direction " + req.matches[1].str());
    }
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return reply_error(res, 400, "body is not valid JSON");
    }
    if (!body.is_object()) return reply_error(res, 400, "body must be a JSON object");
    DirectionLabel l;
    l.k = static_cast<int>(k);
    try {
      l.label = body.value("label", std::string());
      l.confidence = body.value("confidence", std::string("medium"));
      l.annotator = body.value("annotator", std::string("anonymous"));
    } catch (const json::exception&) {
      return reply_error(res, 400, "label, confidence and annotator must be strings");
    }
    if (l.label.find_first_not_of(" \t\r\n") == std::string::npos) return reply_error(res, 422, "label is empty");
    if (!valid_confidence(l.confidence)) return reply_error(res, 422, "confidence must be low, medium or high");
    if (l.annotator.empty()) return reply_error(res, 422, "annotator is empty");
    l.ts = utc_now();
    try {
      labels_.append(l).get();
    } catch (const Error& e) {
      return reply_error(res, 500, e.what());
    }
    reply_json(res, label_json(l), 201);
  });

  server.Get("/labels", [this](const httplib::Request& req, httplib::Response& res) {
    long long only = -1;
    if (req.has_param("k") && !parse_int(req.get_param_value("k"), only)) {
      return reply_error(res, 400, "k must be an integer");
    }
    json out = json::array();
    for (const auto& l : labels_.all())
      if (only < 0 || l.k == only) out.push_back(label_json(l));
    reply_json(res, out);
  });

  server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    reply_json(res, {{"model_checksum", model_checksum_}, {"K", a_.k()}, {"d", g_.latent_dim()}, {"uptime", uptime}});
  });
}

void run_service(Service& service, const std::string& host, int port) {
  httplib::Server server;
  service.install(server);
  if (!server.listen(host, port)) {
    throw Error(ErrorCategory::io, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

}  // namespace latentlens
