#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include "dfl/annotations.hpp"

namespace httplib {
class Server;
}

namespace dfl {

// One line of the sanity pool file: {"image_id","defect","known_level"}.
struct SanityItem {
  std::string image_id;
  DefectKind defect;
  double known_level;
};

std::vector<SanityItem> read_sanity_pool(const std::filesystem::path& path);

struct ServiceConfig {
  std::filesystem::path images_dir;
  std::vector<SanityItem> sanity;
  // Annotation log. Sessions go to a sibling "<store>.sessions" file.
  std::filesystem::path store;
  std::uint64_t seed = 0;
  double sanity_fraction = 0.1;
  int max_session_size = 500;
  std::function<std::string()> clock;  // ISO-8601 UTC; defaults to the system clock
};

struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

// State behind the annotation HTTP API. Handlers are plain methods so they can
// be exercised without a socket; bind() wires them to a server.
class AnnotationService {
 public:
  explicit AnnotationService(ServiceConfig config);

  Reply session(const std::string& worker, int size);
  Reply submit(const std::string& body);
  Reply image(const std::string& id) const;
  Reply stats() const;
  Reply export_jsonl() const;

  void bind(httplib::Server& server);

  std::size_t record_count() const;

 private:
  struct Session {
    std::string id;
    std::string worker;
    std::vector<std::string> images;
    std::set<std::tuple<std::string, DefectKind>> done;
  };

  void replay();
  void append_record(const AnnotationRecord& r);
  void refresh_stats();
  bool session_open(const Session& s) const;

  ServiceConfig config_;
  std::map<std::string, std::filesystem::path> files_;  // image id -> file
  std::vector<std::string> pool_;                       // non-sanity image ids, sorted
  std::map<std::string, std::map<DefectKind, double>> known_;
  std::vector<std::string> sanity_ids_;                 // sorted
  std::map<std::string, int> assigned_;                 // image id -> sessions served

  mutable std::shared_mutex mutex_;
  std::vector<AnnotationRecord> records_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, std::string> open_;  // worker -> session id
  std::ofstream log_;
  std::ofstream session_log_;
  std::shared_ptr<const std::string> stats_;
};

}  // namespace dfl
