#include "dfl/annotations.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dfl {

namespace {

using nlohmann::json;

constexpr int kPooledThreshold = 3;

std::optional<double> parse_number(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw SchemaError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string to_jsonl(const AnnotationRecord& r) {
  json j = {{"image_id", r.image_id},
            {"worker_id", r.worker_id},
            {"defect", defect_name(r.defect)},
            {"level", r.level},
            {"is_sanity", r.is_sanity}};
  if (r.known_level) j["known_level"] = *r.known_level;
  j["ts"] = r.ts;
  if (!r.session.empty()) j["session"] = r.session;
  return j.dump();
}

AnnotationRecord parse_annotation(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("annotation line is not valid JSON: ") + e.what());
  }
  AnnotationRecord r;
  try {
    r.image_id = j.at("image_id").get<std::string>();
    r.worker_id = j.at("worker_id").get<std::string>();
    r.defect = parse_defect(j.at("defect").get<std::string>());
    r.level = j.at("level").get<double>();
    r.is_sanity = j.value("is_sanity", false);
    if (j.contains("known_level") && !j["known_level"].is_null()) {
      r.known_level = j["known_level"].get<double>();
    }
    r.ts = j.value("ts", std::string());
    r.session = j.value("session", std::string());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("annotation record: ") + e.what());
  } catch (const ArgumentError& e) {
    throw SchemaError(std::string("annotation record: ") + e.what());
  }
  if (!is_annotation_level(r.defect, r.level)) {
    throw SchemaError("annotation level " + format_number(r.level) + " is not a valid " +
                      std::string(defect_name(r.defect)) + " level");
  }
  if (r.is_sanity != r.known_level.has_value()) {
    throw SchemaError("known_level must be present exactly for sanity records (image " +
                      r.image_id + ")");
  }
  if (r.known_level && !is_annotation_level(r.defect, *r.known_level)) {
    throw SchemaError("known_level " + format_number(*r.known_level) + " is not a valid " +
                      std::string(defect_name(r.defect)) + " level");
  }
  return r;
}

std::vector<AnnotationRecord> read_annotations(std::istream& in) {
  std::vector<AnnotationRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_annotation(line));
    } catch (const SchemaError& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations '" + path.string() + "'");
  try {
    return read_annotations(in);
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

void write_annotations(std::span<const AnnotationRecord> records, std::ostream& out) {
  for (const auto& r : records) out << to_jsonl(r) << '\n';
}

std::vector<WorkerAccuracy> compute_worker_accuracy(std::span<const AnnotationRecord> records) {
  struct Tally {
    int hits = 0;
    int count = 0;
  };
  std::map<std::pair<std::string, int>, Tally> per_defect;
  std::map<std::string, Tally> pooled;
  std::set<std::pair<std::string, int>> seen;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.worker_id, index_of(r.defect));
    seen.insert(key);
    if (!r.is_sanity || !r.known_level) continue;
    const bool hit = std::abs(r.level - *r.known_level) <= 1e-9;
    auto& t = per_defect[key];
    t.hits += hit;
    ++t.count;
    auto& p = pooled[r.worker_id];
    p.hits += hit;
    ++p.count;
  }

  // Global means over workers with sanity data, per defect and overall.
  std::array<double, kDefectCount> defect_sum{};
  std::array<int, kDefectCount> defect_n{};
  for (const auto& [key, t] : per_defect) {
    defect_sum[key.second] += static_cast<double>(t.hits) / t.count;
    ++defect_n[key.second];
  }
  double pooled_sum = 0.0;
  for (const auto& [w, t] : pooled) pooled_sum += static_cast<double>(t.hits) / t.count;
  const double global = pooled.empty() ? 1.0 : pooled_sum / pooled.size();

  std::vector<WorkerAccuracy> out;
  for (const auto& key : seen) {
    const auto it = per_defect.find(key);
    const int count = it == per_defect.end() ? 0 : it->second.count;
    double acc;
    if (count >= kPooledThreshold) {
      acc = static_cast<double>(it->second.hits) / count;
    } else if (const auto p = pooled.find(key.first); p != pooled.end()) {
      acc = static_cast<double>(p->second.hits) / p->second.count;
    } else if (defect_n[key.second] > 0) {
      acc = defect_sum[key.second] / defect_n[key.second];
    } else {
      acc = global;
    }
    out.push_back({key.first, static_cast<DefectKind>(key.second), acc, count});
  }
  return out;
}

AggregationResult aggregate_labels(std::span<const AnnotationRecord> records,
                                   std::span<const WorkerAccuracy> accuracies,
                                   int min_annotators) {
  if (min_annotators < 1) throw ArgumentError("min_annotators must be >= 1");
  std::map<std::pair<std::string, int>, double> acc;
  std::array<double, kDefectCount> acc_sum{};
  std::array<int, kDefectCount> acc_n{};
  for (const auto& a : accuracies) {
    acc[{a.worker_id, index_of(a.defect)}] = a.accuracy;
    acc_sum[index_of(a.defect)] += a.accuracy;
    ++acc_n[index_of(a.defect)];
  }

  struct Contribution {
    std::string worker;
    double level;
    std::string ts;
  };
  std::map<std::pair<std::string, int>, std::vector<Contribution>> groups;
  for (const auto& r : records) {
    if (r.is_sanity) continue;
    groups[{r.image_id, index_of(r.defect)}].push_back({r.worker_id, r.level, r.ts});
  }

  AggregationResult result;
  for (auto& [key, contribs] : groups) {
    const DefectKind defect = static_cast<DefectKind>(key.second);
    if (static_cast<int>(contribs.size()) < min_annotators) {
      result.rejects.push_back({key.first, defect, static_cast<int>(contribs.size())});
      continue;
    }
    // Canonical order makes the floating-point sum independent of input order.
    std::sort(contribs.begin(), contribs.end(), [](const Contribution& a, const Contribution& b) {
      return std::tie(a.worker, a.level, a.ts) < std::tie(b.worker, b.level, b.ts);
    });
    std::vector<double> w(contribs.size());
    for (std::size_t i = 0; i < contribs.size(); ++i) {
      const auto it = acc.find({contribs[i].worker, key.second});
      if (it != acc.end()) {
        w[i] = it->second;
      } else {
        w[i] = acc_n[key.second] > 0 ? acc_sum[key.second] / acc_n[key.second] : 1.0;
      }
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    const bool equal = std::all_of(w.begin(), w.end(), [&](double v) { return v == w[0]; });
    AggregatedLabel label{key.first, defect, 0.0, {}};
    if (equal || total <= 0.0) {
      double sum = 0.0;
      for (const auto& c : contribs) sum += c.level;
      label.score = sum / static_cast<double>(contribs.size());
      for (const auto& c : contribs) label.contributor_weights.emplace_back(c.worker, 1.0 / contribs.size());
    } else {
      double sum = 0.0;
      for (std::size_t i = 0; i < contribs.size(); ++i) {
        const double wi = w[i] / total;
        sum += wi * contribs[i].level;
        label.contributor_weights.emplace_back(contribs[i].worker, wi);
      }
      label.score = std::clamp(sum, min_score(defect), max_score(defect));
    }
    result.labels.push_back(std::move(label));
  }
  return result;
}

std::vector<GroundTruthRow> to_ground_truth(std::span<const AggregatedLabel> labels) {
  std::map<std::string, GroundTruthRow> rows;
  for (const auto& l : labels) {
    auto& row = rows[l.image_id];
    row.image_id = l.image_id;
    row.scores[index_of(l.defect)] = l.score;
  }
  std::vector<GroundTruthRow> out;
  for (auto& [id, row] : rows) out.push_back(std::move(row));
  return out;
}

void write_ground_truth(std::span<const GroundTruthRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "image_id";
  for (DefectKind d : kAllDefects) out << ',' << defect_name(d);
  out << '\n';
  for (const auto& row : rows) {
    out << row.image_id;
    for (const auto& s : row.scores) {
      out << ',';
      if (s) out << format_number(*s);
    }
    out << '\n';
  }
}

std::vector<GroundTruthRow> read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + ": empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  if (header.size() != kDefectCount + 1 || header[0] != "image_id") {
    throw SchemaError(path.string() + ": expected header image_id followed by the seven defects");
  }
  for (int d = 0; d < kDefectCount; ++d) {
    if (header[d + 1] != defect_name(kAllDefects[d])) {
      throw SchemaError(path.string() + ": column " + std::to_string(d + 2) + " is '" +
                        std::string(header[d + 1]) + "', expected '" +
                        std::string(defect_name(kAllDefects[d])) + "'");
    }
  }
  std::vector<GroundTruthRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != kDefectCount + 1) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(kDefectCount + 1) + " cells");
    }
    GroundTruthRow row;
    row.image_id = std::string(cells[0]);
    try {
      for (int d = 0; d < kDefectCount; ++d) row.scores[d] = parse_number(cells[d + 1]);
    } catch (const SchemaError& e) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string base_image_id(std::string_view image_id) {
  const auto pos = image_id.find("__");
  return std::string(pos == std::string_view::npos ? image_id : image_id.substr(0, pos));
}

DatasetSplit split_dataset(std::span<const std::string> image_ids, double train_fraction,
                           SeededRng& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ArgumentError("train_fraction must lie in (0, 1)");
  }
  std::vector<std::string> bases;
  for (const auto& id : image_ids) bases.push_back(base_image_id(id));
  std::sort(bases.begin(), bases.end());
  bases.erase(std::unique(bases.begin(), bases.end()), bases.end());
  for (std::size_t i = bases.size(); i > 1; --i) std::swap(bases[i - 1], bases[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * bases.size()));
  const std::set<std::string> train_bases(bases.begin(), bases.begin() + n_train);

  DatasetSplit split;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    (train_bases.count(base_image_id(image_ids[i])) ? split.train : split.test).push_back(i);
  }
  return split;
}

std::vector<std::vector<double>> sanity_confusion(std::span<const AnnotationRecord> records,
                                                  DefectKind defect, double pseudo_count) {
  const auto levels = annotation_levels(defect);
  const std::size_t k = levels.size();
  std::vector<std::vector<double>> m(k, std::vector<double>(k, pseudo_count));
  auto level_index = [&](double v) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < k; ++i) {
      if (std::abs(levels[i] - v) <= 1e-9) return i;
    }
    return std::nullopt;
  };
  for (const auto& r : records) {
    if (r.defect != defect || !r.is_sanity || !r.known_level) continue;
    const auto row = level_index(*r.known_level);
    const auto col = level_index(r.level);
    if (row && col) m[*row][*col] += 1.0;
  }
  return m;
}

std::vector<AnnotationBatch> infer_batches(std::span<const AnnotationRecord> records) {
  std::map<std::string, std::set<std::string>> workers_by_image;
  for (const auto& r : records) {
    if (!r.is_sanity) workers_by_image[r.image_id].insert(r.worker_id);
  }
  std::map<std::vector<std::string>, std::vector<std::string>> groups;
  for (const auto& [image, workers] : workers_by_image) {
    groups[std::vector<std::string>(workers.begin(), workers.end())].push_back(image);
  }
  std::vector<AnnotationBatch> out;
  for (auto& [workers, images] : groups) {
    std::string id;
    for (const auto& w : workers) id += (id.empty() ? "" : "+") + w;
    out.push_back({id, workers, images});
  }
  return out;
}

namespace {

BatchDefectConsistency analyse_defect(const std::vector<std::vector<double>>& levels,
                                      DefectKind defect, const CrossClassConfig& cfg) {
  // levels: 5 workers x n images.
  BatchDefectConsistency out;
  const std::size_t n = levels.empty() ? 0 : levels[0].size();
  out.images = static_cast<int>(n);
  if (n < 2) return out;

  double rho_sum = 0.0;
  int min_classes = 0;
  for (int a = 0; a < 5; ++a) {
    for (int b = a + 1; b < 5; ++b) {
      std::vector<double> pair_mean(n), rest_mean(n);
      for (std::size_t i = 0; i < n; ++i) {
        double rest = 0.0;
        for (int w = 0; w < 5; ++w) {
          if (w != a && w != b) rest += levels[w][i];
        }
        pair_mean[i] = (levels[a][i] + levels[b][i]) / 2.0;
        rest_mean[i] = rest / 3.0;
      }
      try {
        const MetricResult r = cross_class_rho(rest_mean, pair_mean, defect, cfg);
        if (r.degenerate_count >= r.repetitions_used) {
          ++out.splits_degenerate;
          continue;
        }
        rho_sum += r.value;
        ++out.splits_used;
        min_classes = min_classes == 0 ? r.class_count : std::min(min_classes, r.class_count);
      } catch (const MetricUndefined&) {
        ++out.splits_degenerate;
      }
    }
  }
  if (out.splits_used > 0) {
    out.rho = std::clamp(rho_sum / out.splits_used, -1.0, 1.0);
    out.rho_p_value = spearman_p_value(*out.rho, min_classes);
  }
  try {
    const MetricResult w = kendalls_w(levels);
    out.w = w.value;
    out.w_p_value = w.p_value;
  } catch (const MetricUndefined&) {
  }
  return out;
}

}  // namespace

ConsistencyReport consistency_analysis(std::span<const AnnotationRecord> records,
                                       const ConsistencyConfig& cfg) {
  ConsistencyReport report;
  const auto batches = infer_batches(records);
  std::map<std::tuple<std::string, int, std::string>, double> level_of;
  for (const auto& r : records) {
    if (!r.is_sanity) level_of[{r.image_id, index_of(r.defect), r.worker_id}] = r.level;
  }

  report.batches.resize(batches.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t b = 0; b < batches.size(); ++b) {
    BatchConsistency& bc = report.batches[b];
    bc.batch = batches[b];
    bc.malformed = batches[b].workers.size() != 5;
    if (bc.malformed) continue;
    for (DefectKind d : kAllDefects) {
      // Images where all five workers rated this defect.
      std::vector<std::vector<double>> levels(5);
      for (const auto& image : bc.batch.images) {
        std::array<double, 5> row{};
        bool complete = true;
        for (int w = 0; w < 5 && complete; ++w) {
          const auto it = level_of.find({image, index_of(d), bc.batch.workers[w]});
          if (it == level_of.end()) {
            complete = false;
          } else {
            row[w] = it->second;
          }
        }
        if (!complete) continue;
        for (int w = 0; w < 5; ++w) levels[w].push_back(row[w]);
      }
      bc.defects[index_of(d)] = analyse_defect(levels, d, cfg.rho);
    }
  }

  for (const auto& bc : report.batches) report.malformed_batches += bc.malformed;
  for (DefectKind d : kAllDefects) {
    const int di = index_of(d);
    auto& summary = report.defects[di];
    std::vector<double> rho_p, w_p;
    std::vector<std::size_t> rho_idx, w_idx;
    double rho_sum = 0.0, w_sum = 0.0;
    for (std::size_t b = 0; b < report.batches.size(); ++b) {
      const auto& bd = report.batches[b].defects[di];
      if (report.batches[b].malformed || bd.images == 0) continue;
      if (bd.rho) {
        rho_sum += *bd.rho;
        rho_p.push_back(*bd.rho_p_value);
        rho_idx.push_back(b);
      } else {
        ++summary.degenerate_batches;
      }
      if (bd.w) {
        w_sum += *bd.w;
        w_p.push_back(*bd.w_p_value);
        w_idx.push_back(b);
      }
    }
    summary.batches_rho = static_cast<int>(rho_idx.size());
    summary.batches_w = static_cast<int>(w_idx.size());
    if (!rho_idx.empty()) {
      summary.mean_rho = rho_sum / rho_idx.size();
      const auto flags = benjamini_hochberg(rho_p, cfg.fdr_q);
      int sig = 0;
      for (std::size_t i = 0; i < flags.size(); ++i) {
        report.batches[rho_idx[i]].defects[di].rho_significant = flags[i];
        sig += flags[i];
      }
      summary.pct_significant_rho = 100.0 * sig / flags.size();
    }
    if (!w_idx.empty()) {
      summary.mean_w = w_sum / w_idx.size();
      const auto flags = benjamini_hochberg(w_p, cfg.fdr_q);
      int sig = 0;
      for (std::size_t i = 0; i < flags.size(); ++i) {
        report.batches[w_idx[i]].defects[di].w_significant = flags[i];
        sig += flags[i];
      }
      summary.pct_significant_w = 100.0 * sig / flags.size();
    }
  }
  return report;
}

std::string consistency_report_json(const ConsistencyReport& report) {
  json table = json::object();
  json rho_row = json::object(), w_row = json::object();
  double rho_sum = 0.0, w_sum = 0.0;
  int rho_n = 0, w_n = 0;
  json per_defect = json::object();
  for (DefectKind d : kAllDefects) {
    const auto& s = report.defects[index_of(d)];
    const std::string name(defect_name(d));
    rho_row[name] = optional_json(s.mean_rho);
    w_row[name] = optional_json(s.mean_w);
    if (s.mean_rho) rho_sum += *s.mean_rho, ++rho_n;
    if (s.mean_w) w_sum += *s.mean_w, ++w_n;
    per_defect[name] = {{"mean_rho", optional_json(s.mean_rho)},
                        {"mean_w", optional_json(s.mean_w)},
                        {"pct_significant_rho", s.pct_significant_rho},
                        {"pct_significant_w", s.pct_significant_w},
                        {"batches_rho", s.batches_rho},
                        {"batches_w", s.batches_w},
                        {"degenerate_batches", s.degenerate_batches}};
  }
  rho_row["mean"] = rho_n ? json(rho_sum / rho_n) : json(nullptr);
  w_row["mean"] = w_n ? json(w_sum / w_n) : json(nullptr);
  table["cross_class_rho"] = rho_row;
  table["kendalls_w"] = w_row;

  json batches = json::array();
  for (const auto& bc : report.batches) {
    json jb = {{"batch_id", bc.batch.batch_id},
               {"workers", bc.batch.workers},
               {"images", bc.batch.images.size()},
               {"malformed", bc.malformed}};
    if (!bc.malformed) {
      json jd = json::object();
      for (DefectKind d : kAllDefects) {
        const auto& bd = bc.defects[index_of(d)];
        if (bd.images == 0) continue;
        jd[std::string(defect_name(d))] = {{"rho", optional_json(bd.rho)},
                                           {"rho_p_value", optional_json(bd.rho_p_value)},
                                           {"rho_significant", bd.rho_significant},
                                           {"splits_used", bd.splits_used},
                                           {"splits_degenerate", bd.splits_degenerate},
                                           {"w", optional_json(bd.w)},
                                           {"w_p_value", optional_json(bd.w_p_value)},
                                           {"w_significant", bd.w_significant},
                                           {"images", bd.images}};
      }
      jb["defects"] = jd;
    }
    batches.push_back(jb);
  }
  json out = {{"table", table},
              {"defects", per_defect},
              {"malformed_batches", report.malformed_batches},
              {"batches", batches}};
  return out.dump(2);
}

}  // namespace dfl
