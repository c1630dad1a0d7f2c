#include "dfl/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace dfl {

namespace {

using nlohmann::json;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Reply error_reply(int status, const std::string& code, const std::string& message) {
  return {status, json{{"error", code}, {"message", message}}.dump()};
}

std::string session_name(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%06zu", index + 1);
  return buf;
}

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::vector<std::string> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace

std::vector<SanityItem> read_sanity_pool(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sanity pool " + path.string());
  std::vector<SanityItem> out;
  int n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    try {
      const auto j = json::parse(line);
      SanityItem item{j.at("image_id").get<std::string>(), parse_defect(j.at("defect").get<std::string>()),
                      j.at("known_level").get<double>()};
      if (!is_annotation_level(item.defect, item.known_level)) {
        throw SchemaError("known_level " + format_number(item.known_level) + " is not a valid " +
                          std::string(defect_name(item.defect)) + " level");
      }
      out.push_back(item);
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const ArgumentError& e) {
      throw SchemaError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

AnnotationService::AnnotationService(ServiceConfig config) : config_(std::move(config)) {
  if (!(config_.sanity_fraction >= 0.0 && config_.sanity_fraction < 1.0)) {
    throw ArgumentError("sanity fraction must be in [0, 1)");
  }
  if (config_.max_session_size < 1) throw ArgumentError("max session size must be positive");
  if (!config_.clock) config_.clock = utc_now;
  if (!config_.images_dir.empty()) {
    if (!std::filesystem::is_directory(config_.images_dir)) {
      throw IoError("image directory " + config_.images_dir.string() + " does not exist");
    }
    for (const auto& e : std::filesystem::directory_iterator(config_.images_dir)) {
      if (!e.is_regular_file() || !is_image_file(e.path())) continue;
      const auto id = e.path().stem().string();
      if (!files_.emplace(id, e.path()).second) throw ArgumentError("duplicate image id " + id);
    }
  }
  for (const auto& s : config_.sanity) {
    if (!files_.count(s.image_id)) throw ArgumentError("sanity image " + s.image_id + " is not in the image directory");
    if (!known_[s.image_id].emplace(s.defect, s.known_level).second) {
      throw ArgumentError("sanity image " + s.image_id + " lists " + std::string(defect_name(s.defect)) + " twice");
    }
  }
  for (const auto& [id, _] : known_) sanity_ids_.push_back(id);
  for (const auto& [id, _] : files_) {
    if (!known_.count(id)) pool_.push_back(id);
  }
  replay();
}

void AnnotationService::replay() {
  if (config_.store.empty()) {
    refresh_stats();
    return;
  }
  auto session_path = config_.store;
  session_path += ".sessions";
  for (const auto& line : read_lines(session_path)) {
    Session s;
    try {
      const auto j = json::parse(line);
      s.id = j.at("session").get<std::string>();
      s.worker = j.at("worker").get<std::string>();
      s.images = j.at("images").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw SchemaError(session_path.string() + ": " + e.what());
    }
    for (const auto& id : s.images) ++assigned_[id];
    open_[s.worker] = s.id;
    sessions_.emplace(s.id, std::move(s));
  }
  if (std::filesystem::exists(config_.store)) records_ = read_annotations(config_.store);
  for (const auto& r : records_) {
    auto it = sessions_.find(r.session);
    if (it != sessions_.end()) it->second.done.emplace(r.image_id, r.defect);
  }
  for (auto it = open_.begin(); it != open_.end();) {
    it = session_open(sessions_.at(it->second)) ? std::next(it) : open_.erase(it);
  }
  log_.open(config_.store, std::ios::app);
  session_log_.open(session_path, std::ios::app);
  if (!log_ || !session_log_) throw IoError("cannot append to store " + config_.store.string());
  refresh_stats();
}

bool AnnotationService::session_open(const Session& s) const {
  return s.done.size() < s.images.size() * static_cast<std::size_t>(kDefectCount);
}

Reply AnnotationService::session(const std::string& worker, int size) {
  if (worker.empty()) return error_reply(400, "missing_worker", "worker is required");
  if (size < 1 || size > config_.max_session_size) {
    return error_reply(400, "invalid_size", "size must be between 1 and " + std::to_string(config_.max_session_size));
  }
  std::unique_lock lock(mutex_);
  const Session* s = nullptr;
  if (auto it = open_.find(worker); it != open_.end()) {
    s = &sessions_.at(it->second);
  } else {
    const int want_sanity = static_cast<int>(std::lround(size * config_.sanity_fraction));
    const int n_sanity = std::min<int>(want_sanity, static_cast<int>(sanity_ids_.size()));
    const int n_regular = size - n_sanity;
    if ((n_regular > 0 && pool_.empty()) || (want_sanity > 0 && sanity_ids_.empty())) {
      return error_reply(503, "pool_empty", "no images are available for a session");
    }
    SeededRng rng(config_.seed, mix_stream(streams::kService, sessions_.size()));
    // Least-served images first, ties broken at random.
    std::vector<std::pair<std::pair<int, double>, std::string>> ranked;
    for (const auto& id : pool_) {
      const auto a = assigned_.find(id);
      ranked.push_back({{a == assigned_.end() ? 0 : a->second, rng.uniform()}, id});
    }
    std::sort(ranked.begin(), ranked.end());
    Session fresh;
    fresh.id = session_name(sessions_.size());
    fresh.worker = worker;
    for (int i = 0; i < n_regular && i < static_cast<int>(ranked.size()); ++i) fresh.images.push_back(ranked[i].second);
    auto sanity = sanity_ids_;
    for (int i = 0; i < n_sanity; ++i) {
      std::swap(sanity[i], sanity[i + rng.below(sanity.size() - i)]);
      fresh.images.push_back(sanity[i]);
    }
    for (std::size_t i = fresh.images.size(); i > 1; --i) std::swap(fresh.images[i - 1], fresh.images[rng.below(i)]);
    for (const auto& id : fresh.images) ++assigned_[id];
    if (session_log_.is_open()) {
      session_log_ << json{{"session", fresh.id}, {"worker", worker}, {"images", fresh.images}}.dump() << '\n';
      session_log_.flush();
    }
    open_[worker] = fresh.id;
    s = &sessions_.emplace(fresh.id, std::move(fresh)).first->second;
  }
  json images = json::array();
  for (const auto& id : s->images) images.push_back({{"image_id", id}, {"url", "/api/images/" + id}});
  json defects = json::array();
  for (DefectKind d : kAllDefects) defects.push_back({{"defect", defect_name(d)}, {"levels", annotation_levels(d)}});
  return {200, json{{"session", s->id},
                    {"worker", s->worker},
                    {"images", images},
                    {"defects", defects},
                    {"completed", s->done.size()}}
                   .dump()};
}

Reply AnnotationService::submit(const std::string& body) {
  std::string session_id, image_id;
  DefectKind defect;
  double level;
  try {
    const auto j = json::parse(body);
    session_id = j.at("session").get<std::string>();
    image_id = j.at("image_id").get<std::string>();
    defect = parse_defect(j.at("defect").get<std::string>());
    if (!j.at("level").is_number()) return error_reply(400, "invalid_level", "level must be a number");
    level = j["level"].get<double>();
  } catch (const json::exception& e) {
    return error_reply(400, "bad_request", e.what());
  } catch (const ArgumentError& e) {
    return error_reply(400, "invalid_defect", e.what());
  }
  if (!is_annotation_level(defect, level)) {
    return error_reply(400, "invalid_level",
                       format_number(level) + " is not a " + std::string(defect_name(defect)) + " level");
  }

  std::unique_lock lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return error_reply(404, "unknown_session", "no session " + session_id);
  Session& s = it->second;
  if (std::find(s.images.begin(), s.images.end(), image_id) == s.images.end()) {
    return error_reply(404, "unknown_image", image_id + " is not in session " + session_id);
  }
  if (s.done.count({image_id, defect})) {
    return error_reply(409, "already_annotated", image_id + " already has a " + std::string(defect_name(defect)) +
                                                     " annotation in this session");
  }
  AnnotationRecord r;
  r.image_id = image_id;
  r.worker_id = s.worker;
  r.defect = defect;
  r.level = annotation_levels(defect)[0];
  for (double v : annotation_levels(defect)) {
    if (std::abs(v - level) < std::abs(r.level - level)) r.level = v;
  }
  if (auto k = known_.find(image_id); k != known_.end()) {
    if (auto kd = k->second.find(defect); kd != k->second.end()) {
      r.is_sanity = true;
      r.known_level = kd->second;
    }
  }
  r.ts = config_.clock();
  r.session = session_id;
  append_record(r);
  s.done.emplace(image_id, defect);
  const bool open = session_open(s);
  if (!open) open_.erase(s.worker);
  refresh_stats();
  return {200, json{{"ok", true},
                    {"completed", s.done.size()},
                    {"remaining", s.images.size() * kDefectCount - s.done.size()},
                    {"session_open", open}}
                   .dump()};
}

void AnnotationService::append_record(const AnnotationRecord& r) {
  if (log_.is_open()) {
    log_ << to_jsonl(r) << '\n';
    log_.flush();
    if (!log_) throw IoError("failed writing store " + config_.store.string());
  }
  records_.push_back(r);
}

void AnnotationService::refresh_stats() {
  std::map<std::string, std::tuple<int, int, int>> totals;  // annotations, sanity, hits
  for (const auto& r : records_) {
    auto& [n, sanity, hits] = totals[r.worker_id];
    ++n;
    if (r.is_sanity) {
      ++sanity;
      hits += std::abs(r.level - *r.known_level) < 1e-9;
    }
  }
  const auto acc = compute_worker_accuracy(records_);
  json workers = json::array();
  for (const auto& [w, t] : totals) {
    const auto [n, sanity, hits] = t;
    json defects = json::array();
    for (const auto& a : acc) {
      if (a.worker_id != w) continue;
      defects.push_back({{"defect", defect_name(a.defect)}, {"accuracy", a.accuracy}, {"sanity_count", a.sanity_count}});
    }
    workers.push_back({{"worker_id", w},
                       {"annotations", n},
                       {"sanity_count", sanity},
                       {"accuracy", sanity > 0 ? json(static_cast<double>(hits) / sanity) : json(nullptr)},
                       {"defects", defects}});
  }
  stats_ = std::make_shared<const std::string>(json{{"workers", workers}, {"records", records_.size()}}.dump());
}

Reply AnnotationService::image(const std::string& id) const {
  auto it = files_.find(id);
  if (it == files_.end()) return error_reply(404, "unknown_image", "no image " + id);
  std::ifstream in(it->second, std::ios::binary);
  if (!in) return error_reply(404, "unknown_image", "cannot read image " + id);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto ext = it->second.extension().string();
  return {200, std::move(bytes), ext == ".png" || ext == ".PNG" ? "image/png" : "image/jpeg"};
}

Reply AnnotationService::stats() const {
  std::shared_ptr<const std::string> snapshot;
  {
    std::shared_lock lock(mutex_);
    snapshot = stats_;
  }
  return {200, *snapshot};
}

Reply AnnotationService::export_jsonl() const {
  std::string body;
  std::shared_lock lock(mutex_);
  for (const auto& r : records_) body += to_jsonl(r) + '\n';
  return {200, std::move(body), "application/x-ndjson"};
}

std::size_t AnnotationService::record_count() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

void AnnotationService::bind(httplib::Server& server) {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type.c_str());
  };
  server.Get("/api/session", [this, send](const httplib::Request& req, httplib::Response& res) {
    int size = 20;
    if (req.has_param("size")) {
      const auto text = req.get_param_value("size");
      char* end = nullptr;
      const long v = std::strtol(text.c_str(), &end, 10);
      if (text.empty() || *end != '\0') return send(res, error_reply(400, "invalid_size", "size must be an integer"));
      size = static_cast<int>(std::clamp<long>(v, -1, 1L << 30));
    }
    send(res, session(req.get_param_value("worker"), size));
  });
  server.Post("/api/annotations",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, submit(req.body)); });
  server.Get(R"(/api/images/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, image(req.matches[1]));
  });
  server.Get("/api/stats", [this, send](const httplib::Request&, httplib::Response& res) { send(res, stats()); });
  server.Get("/api/export",
             [this, send](const httplib::Request&, httplib::Response& res) { send(res, export_jsonl()); });
}

}  // namespace dfl
