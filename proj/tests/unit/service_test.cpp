#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dfl/raster.hpp"
#include "dfl/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dfl;

namespace {

// Image directory with `regular` pool images r00.. and `sanity` images k00..,
// each sanity image carrying a known noise level.
struct Fixture {
  fs::path dir;
  std::vector<SanityItem> sanity;

  Fixture(const std::string& name, int regular, int sanity_count) {
    dir = fs::temp_directory_path() / ("dfl_service_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir / "images");
    Raster r(4, 3);
    for (int i = 0; i < regular; ++i) save(r, dir / "images" / (id("r", i) + ".png"));
    for (int i = 0; i < sanity_count; ++i) {
      save(r, dir / "images" / (id("k", i) + ".png"));
      sanity.push_back({id("k", i), DefectKind::Noise, i % 2 ? 1.0 : 0.0});
    }
  }
  ~Fixture() { fs::remove_all(dir); }

  static std::string id(const char* prefix, int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%s%02d", prefix, i);
    return buf;
  }

  ServiceConfig config(std::uint64_t seed = 1, bool persist = true) const {
    ServiceConfig c;
    c.images_dir = dir / "images";
    c.sanity = sanity;
    if (persist) c.store = dir / "store.jsonl";
    c.seed = seed;
    c.clock = [] { return std::string("2026-01-01T00:00:00Z"); };
    return c;
  }
};

// Runs the service on an ephemeral local port for the lifetime of the object.
struct Running {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit Running(AnnotationService& service) {
    service.bind(server);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~Running() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

json get_json(httplib::Client& c, const std::string& path, int expect = 200) {
  auto res = c.Get(path);
  EXPECT_TRUE(res);
  EXPECT_EQ(res->status, expect) << res->body;
  return json::parse(res->body);
}

httplib::Result post(httplib::Client& c, const json& body) {
  return c.Post("/api/annotations", body.dump(), "application/json");
}

std::vector<std::string> image_ids(const json& session) {
  std::vector<std::string> out;
  for (const auto& i : session["images"]) out.push_back(i["image_id"]);
  return out;
}

int count_sanity(const std::vector<std::string>& ids) {
  return static_cast<int>(std::count_if(ids.begin(), ids.end(), [](const auto& s) { return s[0] == 'k'; }));
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST(Service, SessionInjectsConfiguredSanityShare) {
  Fixture fx("share", 40, 6);
  AnnotationService service(fx.config());
  Running run(service);
  auto c = run.client();
  auto res = c.Get("/api/session?worker=w1&size=20");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto s = json::parse(res->body);
  const auto ids = image_ids(s);
  EXPECT_EQ(ids.size(), 20u);
  EXPECT_EQ(count_sanity(ids), 2);
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 20u);
  EXPECT_EQ(res->body.find("is_sanity"), std::string::npos);
  EXPECT_EQ(res->body.find("known_level"), std::string::npos);
  EXPECT_EQ(res->body.find("sanity"), std::string::npos);
}

TEST(Service, SanityPositionsVaryAcrossSessions) {
  Fixture fx("positions", 200, 10);
  AnnotationService service(fx.config(3, false));
  std::set<std::vector<int>> layouts;
  for (int w = 0; w < 30; ++w) {
    const auto ids = image_ids(json::parse(service.session("w" + std::to_string(w), 20).body));
    std::vector<int> pos;
    for (int i = 0; i < 20; ++i) {
      if (ids[i][0] == 'k') pos.push_back(i);
    }
    ASSERT_EQ(pos.size(), 2u);
    layouts.insert(pos);
  }
  EXPECT_GT(layouts.size(), 20u);
}

TEST(Service, SessionsAreDeterministicUnderSeed) {
  Fixture fx("determinism", 30, 4);
  auto run_sequence = [&](std::uint64_t seed) {
    AnnotationService service(fx.config(seed, false));
    std::vector<std::string> bodies;
    for (const char* w : {"a", "b", "c", "a"}) bodies.push_back(service.session(w, 10).body);
    return bodies;
  };
  EXPECT_EQ(run_sequence(7), run_sequence(7));
  EXPECT_NE(run_sequence(7), run_sequence(8));
}

TEST(Service, SessionIsIdempotentWhileOpen) {
  Fixture fx("idempotent", 30, 4);
  AnnotationService service(fx.config(1, false));
  const auto first = service.session("w", 10);
  EXPECT_EQ(service.session("w", 10).body, first.body);
  EXPECT_EQ(service.session("w", 5).body, first.body);
  EXPECT_NE(json::parse(service.session("v", 10).body)["session"], json::parse(first.body)["session"]);
}

TEST(Service, CompletedSessionIsReplaced) {
  Fixture fx("complete", 2, 0);
  auto cfg = fx.config(1, false);
  cfg.sanity_fraction = 0.0;
  AnnotationService service(cfg);
  const auto s = json::parse(service.session("w", 1).body);
  const std::string image = s["images"][0]["image_id"];
  for (DefectKind d : kAllDefects) {
    const json body{{"session", s["session"]}, {"image_id", image}, {"defect", defect_name(d)},
                    {"level", annotation_levels(d)[0]}};
    ASSERT_EQ(service.submit(body.dump()).status, 200);
  }
  const auto next = json::parse(service.session("w", 1).body);
  EXPECT_NE(next["session"], s["session"]);
  EXPECT_NE(next["images"][0]["image_id"], image);
}

TEST(Service, EmptyPoolIs503) {
  Fixture fx("empty", 0, 0);
  AnnotationService service(fx.config());
  Running run(service);
  auto c = run.client();
  const auto j = get_json(c, "/api/session?worker=w&size=20", 503);
  EXPECT_EQ(j["error"], "pool_empty");
}

TEST(Service, SessionParameterErrors) {
  Fixture fx("params", 5, 1);
  AnnotationService service(fx.config());
  Running run(service);
  auto c = run.client();
  EXPECT_EQ(get_json(c, "/api/session?size=20", 400)["error"], "missing_worker");
  EXPECT_EQ(get_json(c, "/api/session?worker=w&size=0", 400)["error"], "invalid_size");
  EXPECT_EQ(get_json(c, "/api/session?worker=w&size=abc", 400)["error"], "invalid_size");
}

TEST(Service, SubmissionRules) {
  Fixture fx("submit", 20, 2);
  AnnotationService service(fx.config());
  Running run(service);
  auto c = run.client();
  const auto s = get_json(c, "/api/session?worker=w1&size=10");
  const std::string sid = s["session"], image = s["images"][0]["image_id"];

  auto res = post(c, {{"session", sid}, {"image_id", image}, {"defect", "noise"}, {"level", 0.5}});
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(line_count(fx.dir / "store.jsonl"), 1u);
  EXPECT_EQ(res->body.find("sanity"), std::string::npos);
  EXPECT_EQ(res->body.find("known"), std::string::npos);

  res = post(c, {{"session", sid}, {"image_id", image}, {"defect", "noise"}, {"level", 0.3}});
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["error"], "invalid_level");

  res = post(c, {{"session", sid}, {"image_id", image}, {"defect", "noise"}, {"level", 1.0}});
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(json::parse(res->body)["error"], "already_annotated");

  res = post(c, {{"session", sid}, {"image_id", image}, {"defect", "saturation"}, {"level", 0.5}});
  EXPECT_EQ(res->status, 200);

  res = post(c, {{"session", "s999999"}, {"image_id", image}, {"defect", "noise"}, {"level", 0.5}});
  EXPECT_EQ(res->status, 404);
  res = post(c, {{"session", sid}, {"image_id", "nope"}, {"defect", "noise"}, {"level", 0.5}});
  EXPECT_EQ(res->status, 404);
  res = post(c, {{"session", sid}, {"image_id", image}, {"defect", "sharpness"}, {"level", 0.5}});
  EXPECT_EQ(res->status, 400);
  res = c.Post("/api/annotations", "{not json", "application/json");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(line_count(fx.dir / "store.jsonl"), 2u);
}

TEST(Service, ServerAttachesSanityMetadata) {
  Fixture fx("attach", 10, 2);
  auto cfg = fx.config();
  cfg.sanity_fraction = 0.5;
  AnnotationService service(cfg);
  const auto s = json::parse(service.session("w", 4).body);
  for (const auto& id : image_ids(s)) {
    ASSERT_EQ(service.submit(json{{"session", s["session"]}, {"image_id", id}, {"defect", "noise"}, {"level", 1.0}}
                                 .dump())
                  .status,
              200);
  }
  const auto records = read_annotations(fx.dir / "store.jsonl");
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) {
    EXPECT_EQ(r.is_sanity, r.image_id[0] == 'k');
    EXPECT_EQ(r.known_level.has_value(), r.is_sanity);
    EXPECT_EQ(r.worker_id, "w");
  }
}

TEST(Service, StatsFollowSanityMatches) {
  Fixture fx("stats", 10, 2);
  auto cfg = fx.config();
  cfg.sanity_fraction = 0.5;
  AnnotationService service(cfg);
  Running run(service);
  auto c = run.client();
  const auto s = get_json(c, "/api/session?worker=w1&size=4");
  for (const auto& id : image_ids(s)) {
    if (id[0] != 'k') continue;
    const double known = id == "k01" ? 1.0 : 0.0;
    ASSERT_EQ(post(c, {{"session", s["session"]}, {"image_id", id}, {"defect", "noise"}, {"level", known}})->status,
              200);
  }
  const auto stats = get_json(c, "/api/stats");
  ASSERT_EQ(stats["workers"].size(), 1u);
  EXPECT_EQ(stats["workers"][0]["worker_id"], "w1");
  EXPECT_EQ(stats["workers"][0]["sanity_count"], 2);
  EXPECT_DOUBLE_EQ(stats["workers"][0]["accuracy"].get<double>(), 1.0);
  for (const auto& d : stats["workers"][0]["defects"]) EXPECT_DOUBLE_EQ(d["accuracy"].get<double>(), 1.0);
}

TEST(Service, ExportRoundTrips) {
  Fixture fx("export", 10, 1);
  AnnotationService service(fx.config());
  Running run(service);
  auto c = run.client();
  auto res = c.Get("/api/export");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_TRUE(res->body.empty());

  const auto s = get_json(c, "/api/session?worker=w&size=5");
  const auto ids = image_ids(s);
  for (int i = 0; i < 3; ++i) {
    ASSERT_EQ(post(c, {{"session", s["session"]}, {"image_id", ids[i]}, {"defect", "haze"}, {"level", 0.5}})->status,
              200);
  }
  res = c.Get("/api/export");
  std::istringstream in(res->body);
  const auto records = read_annotations(in);
  EXPECT_EQ(records.size(), 3u);
  std::ifstream file(fx.dir / "store.jsonl");
  const std::string on_disk((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  EXPECT_EQ(res->body, on_disk);
}

TEST(Service, ImagesAreServed) {
  Fixture fx("images", 2, 0);
  AnnotationService service(fx.config());
  Running run(service);
  auto c = run.client();
  auto res = c.Get("/api/images/r01");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
  std::ifstream file(fx.dir / "images" / "r01.png", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  EXPECT_EQ(res->body, bytes);
  EXPECT_EQ(c.Get("/api/images/missing")->status, 404);
}

TEST(Service, ReplayRestoresState) {
  Fixture fx("replay", 12, 2);
  std::string stats, exported, session;
  {
    AnnotationService service(fx.config());
    const auto s = json::parse(service.session("w", 6).body);
    for (const auto& id : image_ids(s)) {
      service.submit(json{{"session", s["session"]}, {"image_id", id}, {"defect", "noise"}, {"level", 0.0}}.dump());
    }
    service.session("v", 6);
    stats = service.stats().body;
    exported = service.export_jsonl().body;
    session = service.session("w", 6).body;
  }
  AnnotationService restarted(fx.config());
  EXPECT_EQ(restarted.stats().body, stats);
  EXPECT_EQ(restarted.export_jsonl().body, exported);
  EXPECT_EQ(restarted.session("w", 6).body, session);
  const auto s = json::parse(session);
  const auto dup = restarted.submit(
      json{{"session", s["session"]}, {"image_id", s["images"][0]["image_id"]}, {"defect", "noise"}, {"level", 0.0}}
          .dump());
  EXPECT_EQ(dup.status, 409);
  EXPECT_NE(json::parse(restarted.session("u", 6).body)["session"], s["session"]);
}

TEST(Service, ConcurrentSubmissionsKeepLinesAtomic) {
  Fixture fx("concurrent", 40, 0);
  auto cfg = fx.config();
  cfg.sanity_fraction = 0.0;
  AnnotationService service(cfg);
  Running run(service);
  constexpr int kWorkers = 8, kImages = 5;
  std::vector<json> sessions;
  {
    auto c = run.client();
    for (int w = 0; w < kWorkers; ++w) {
      sessions.push_back(get_json(c, "/api/session?worker=w" + std::to_string(w) + "&size=" + std::to_string(kImages)));
    }
  }
  std::atomic<int> ok{0};
  std::vector<std::thread> threads;
  for (int w = 0; w < kWorkers; ++w) {
    threads.emplace_back([&, w] {
      auto c = run.client();
      for (const auto& id : image_ids(sessions[w])) {
        for (DefectKind d : kAllDefects) {
          const json body{{"session", sessions[w]["session"]}, {"image_id", id}, {"defect", defect_name(d)},
                          {"level", annotation_levels(d).back()}};
          auto res = post(c, body);
          ok += res && res->status == 200;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), kWorkers * kImages * kDefectCount);
  const auto records = read_annotations(fx.dir / "store.jsonl");
  EXPECT_EQ(records.size(), static_cast<std::size_t>(kWorkers * kImages * kDefectCount));
}

TEST(Service, ExportFeedsAggregation) {
  Fixture fx("aggregate", 3, 0);
  auto cfg = fx.config();
  cfg.sanity_fraction = 0.0;
  AnnotationService service(cfg);
  const double levels[5] = {0.0, 0.5, 0.5, 1.0, 1.0};
  for (int w = 0; w < 5; ++w) {
    const auto s = json::parse(service.session("w" + std::to_string(w), 3).body);
    for (const auto& id : image_ids(s)) {
      ASSERT_EQ(service.submit(json{{"session", s["session"]}, {"image_id", id}, {"defect", "blur"}, {"level", levels[w]}}
                                   .dump())
                    .status,
                200);
    }
  }
  std::istringstream in(service.export_jsonl().body);
  const auto records = read_annotations(in);
  const auto acc = compute_worker_accuracy(records);
  const auto agg = aggregate_labels(records, acc);
  ASSERT_EQ(agg.labels.size(), 3u);
  for (const auto& l : agg.labels) EXPECT_EQ(l.score, (0.0 + 0.5 + 0.5 + 1.0 + 1.0) / 5.0);
}

TEST(Service, SanityPoolFile) {
  const auto path = fs::temp_directory_path() / "dfl_sanity_pool.jsonl";
  {
    std::ofstream out(path);
    out << R"({"image_id":"a","defect":"noise","known_level":1})" << "\n"
        << R"({"image_id":"b","defect":"saturation","known_level":-0.5})" << "\n";
  }
  const auto pool = read_sanity_pool(path);
  ASSERT_EQ(pool.size(), 2u);
  EXPECT_EQ(pool[1].defect, DefectKind::OverUnderSaturation);
  {
    std::ofstream out(path);
    out << R"({"image_id":"a","defect":"noise","known_level":0.3})" << "\n";
  }
  EXPECT_THROW(read_sanity_pool(path), SchemaError);
  fs::remove(path);
}
