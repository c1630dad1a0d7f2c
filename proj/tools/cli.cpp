#include "cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dfl/annotations.hpp"
#include "dfl/baselines.hpp"
#include "dfl/metrics.hpp"
#include "dfl/model.hpp"
#include "dfl/service.hpp"
#include "dfl/synth.hpp"

namespace dfl {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string g_provenance;

// Shell-style rendering of the invocation, embedded in every artifact.
std::string command_line(const std::vector<std::string>& args) {
  std::string out;
  for (const auto& a : args) {
    if (!out.empty()) out += ' ';
    if (a.find_first_of(" \t\"'") == std::string::npos && !a.empty()) {
      out += a;
    } else {
      out += '\'' + a + '\'';
    }
  }
  return out;
}

std::string provenance(std::uint64_t seed) { return g_provenance + " [seed " + std::to_string(seed) + "]"; }

void note_seed(const CLI::Option* opt, std::uint64_t seed) {
  if (opt->count() == 0) std::cerr << "seed: " << seed << " (default)\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + " is not valid JSON: " + e.what());
  }
}

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// Image files in a directory, sorted by path.
std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path find_image(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"}) {
    auto p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  throw IoError("no image file for '" + id + "' in " + dir.string());
}

// Manifest paths are written as given to synth; relative ones that do not
// resolve from the working directory are tried against the manifest's folder.
fs::path resolve(const fs::path& manifest, const std::string& path) {
  fs::path p(path);
  if (p.is_relative() && !fs::exists(p)) {
    auto alt = manifest.parent_path() / p;
    if (fs::exists(alt)) return alt;
  }
  return p;
}

struct LabeledImage {
  std::string id;
  fs::path path;
  LabelVector labels{};
};

std::vector<LabeledImage> labeled_images(const fs::path& manifest, const std::string& images_dir) {
  std::vector<LabeledImage> out;
  if (manifest.extension() == ".csv") {
    if (images_dir.empty()) throw ArgumentError("a ground-truth CSV manifest needs --images");
    for (const auto& row : read_ground_truth(manifest)) {
      LabeledImage li{row.image_id, find_image(images_dir, row.image_id)};
      for (int d = 0; d < kDefectCount; ++d) {
        if (!row.scores[d]) {
          throw DataError("image " + row.image_id + " has no " + std::string(defect_name(kAllDefects[d])) + " score");
        }
        li.labels[d] = *row.scores[d];
      }
      out.push_back(std::move(li));
    }
  } else {
    for (const auto& row : read_manifest(manifest)) {
      out.push_back({row.image_id, resolve(manifest, row.path), row.labels()});
    }
  }
  if (out.empty()) throw DataError("manifest " + manifest.string() + " lists no images");
  return out;
}

std::string fmt(double v) { return format_number(v); }

// Config file: a JSON object keyed by flag names (underscores or dashes).
// Keys already given on the command line are left alone.
std::vector<std::string> config_arguments(CLI::App& sub, const std::vector<std::string>& given,
                                          const fs::path& path) {
  const auto j = read_json(path);
  if (!j.is_object()) throw SchemaError("config " + path.string() + " must be a JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "--config") continue;
    CLI::Option* opt = sub.get_option_no_throw(flag);
    if (!opt) throw SchemaError("config key '" + key + "' is not a flag of '" + sub.get_name() + "'");
    const bool on_cli = std::any_of(given.begin(), given.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (on_cli) continue;
    if (opt->get_expected_min() == 0) {
      if (!value.is_boolean()) throw SchemaError("config key '" + key + "' must be true or false");
      if (value.get<bool>()) out.push_back(flag);
      continue;
    }
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array()) {
      for (const auto& v : value) text += (text.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
    } else if (value.is_number() || value.is_boolean()) {
      text = value.dump();
    } else {
      throw SchemaError("config key '" + key + "' has an unsupported value");
    }
    out.push_back(flag + "=" + text);
  }
  return out;
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string base_dir, out_dir, defects = "all", levels = "auto", style = "mixed";
  std::uint64_t seed = 0;
  int count = 0, size = 256;
};

int run_synth(const SynthArgs& a, const CLI::Option* seed_opt) {
  note_seed(seed_opt, a.seed);
  std::vector<ImageRef> bases;
  if (fs::is_directory(a.base_dir)) {
    for (const auto& p : list_images(a.base_dir)) {
      if (a.count > 0 && static_cast<int>(bases.size()) == a.count) break;
      bases.push_back({p.stem().string(), p.string()});
    }
  }
  if (bases.empty()) {
    if (a.count < 1) throw ArgumentError(a.base_dir + " has no images; pass --count to generate a base corpus");
    if (a.style == "mixed") {
      // Alternate natural and textured bases, named consecutively.
      fs::create_directories(a.base_dir);
      for (int i = 0; i < a.count; ++i) {
        SeededRng rng(a.seed, mix_stream(streams::kBaseCorpus, static_cast<std::uint64_t>(i)));
        const auto img = generate_base_image(a.size, rng, i % 2 ? BaseStyle::Textured : BaseStyle::Natural);
        char name[32];
        std::snprintf(name, sizeof name, "base_%04d", i);
        const auto path = fs::path(a.base_dir) / (std::string(name) + ".png");
        save(img, path);
        bases.push_back({name, path.string(), a.size, a.size});
      }
    } else {
      bases = generate_base_corpus(a.count, a.size, a.seed, a.base_dir,
                                   a.style == "textured" ? BaseStyle::Textured : BaseStyle::Natural);
    }
  }
  const auto sequences = parse_sequences(a.defects == "all" ? "exposure,white_balance,saturation,noise,haze,blur,composition"
                                                            : a.defects);
  auto manifest = build_synth_dataset(bases, sequences, a.seed, a.out_dir);
  if (a.levels != "auto") {
    std::vector<int> keep;
    std::stringstream ss(a.levels);
    for (std::string t; std::getline(ss, t, ',');) {
      try {
        keep.push_back(std::stoi(t));
      } catch (const std::exception&) {
        throw ArgumentError("--levels must be 'auto' or a comma list of level indices");
      }
    }
    SynthManifest kept;
    for (auto& r : manifest) {
      if (std::find(keep.begin(), keep.end(), r.level) != keep.end()) {
        kept.push_back(std::move(r));
      } else {
        fs::remove(r.path);
      }
    }
    manifest = std::move(kept);
  }
  const auto path = fs::path(a.out_dir) / "manifest.json";
  write_manifest(manifest, path);
  write_text(fs::path(a.out_dir) / "manifest.provenance.json",
             json{{"provenance", provenance(a.seed)}, {"bases", bases.size()}, {"images", manifest.size()}}.dump(1) +
                 "\n");
  std::cout << "wrote " << manifest.size() << " images from " << bases.size() << " bases to " << path.string() << "\n";
  return 0;
}

// ---- aggregate / consistency ---------------------------------------------

struct AggregateArgs {
  std::string annotations, out, accuracy_out, train_out, test_out;
  int min_annotators = 5;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

int run_aggregate(const AggregateArgs& a, const CLI::Option* seed_opt) {
  const auto records = read_annotations(a.annotations);
  const auto acc = compute_worker_accuracy(records);
  const auto agg = aggregate_labels(records, acc, a.min_annotators);
  const auto rows = to_ground_truth(agg.labels);
  write_ground_truth(rows, a.out);
  if (!a.accuracy_out.empty()) {
    json j = json::array();
    for (const auto& w : acc) {
      j.push_back({{"worker_id", w.worker_id},
                   {"defect", defect_name(w.defect)},
                   {"accuracy", w.accuracy},
                   {"sanity_count", w.sanity_count}});
    }
    write_text(a.accuracy_out, j.dump(1) + "\n");
  }
  if (!a.train_out.empty() || !a.test_out.empty()) {
    if (a.train_out.empty() || a.test_out.empty()) throw ArgumentError("--train-out and --test-out go together");
    note_seed(seed_opt, a.seed);
    std::vector<std::string> ids;
    for (const auto& r : rows) ids.push_back(r.image_id);
    SeededRng rng(a.seed, streams::kSplit);
    const auto split = split_dataset(ids, a.train_fraction, rng);
    std::vector<GroundTruthRow> train, test;
    for (auto i : split.train) train.push_back(rows[i]);
    for (auto i : split.test) test.push_back(rows[i]);
    write_ground_truth(train, a.train_out);
    write_ground_truth(test, a.test_out);
  }
  std::cout << rows.size() << " images, " << agg.labels.size() << " labels, " << agg.rejects.size()
            << " (image, defect) pairs rejected for fewer than " << a.min_annotators << " annotators\n";
  return 0;
}

struct ConsistencyArgs {
  std::string annotations, out;
  int reps = 15000;
  double fdr = 0.05;
  std::uint64_t seed = 0;
};

int run_consistency(const ConsistencyArgs& a, const CLI::Option* seed_opt) {
  note_seed(seed_opt, a.seed);
  ConsistencyConfig cfg;
  cfg.rho.repetitions = a.reps;
  cfg.rho.seed = a.seed;
  cfg.fdr_q = a.fdr;
  const auto report = consistency_analysis(read_annotations(a.annotations), cfg);
  auto j = json::parse(consistency_report_json(report));
  j["provenance"] = provenance(a.seed);
  write_text(a.out, j.dump(1) + "\n");
  std::cout << std::left << std::setw(20) << "defect" << std::setw(10) << "rho" << std::setw(10) << "W"
            << std::setw(10) << "%sig rho" << "%sig W\n";
  for (DefectKind d : kAllDefects) {
    const auto& s = report.defects[index_of(d)];
    auto cell = [](const std::optional<double>& v) { return v ? fmt(std::round(*v * 1e4) / 1e4) : std::string("-"); };
    std::cout << std::setw(20) << defect_name(d) << std::setw(10) << cell(s.mean_rho) << std::setw(10) << cell(s.mean_w)
              << std::setw(10) << fmt(std::round(s.pct_significant_rho * 10) / 10)
              << fmt(std::round(s.pct_significant_w * 10) / 10) << "\n";
  }
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string manifest, images, out_dir, loss = "infogain", annotations;
  TrainConfig cfg;
  bool no_augment = false;
};

int run_train(TrainArgs a, const CLI::Option* seed_opt) {
  note_seed(seed_opt, a.cfg.seed);
  a.cfg.loss = parse_loss(a.loss);
  a.cfg.augment = !a.no_augment;
  a.cfg.validate();
  const auto items = labeled_images(a.manifest, a.images);
  std::vector<TrainingImage> images;
  for (const auto& li : items) images.push_back({li.id, li.labels});

  InfogainSet infogain = fallback_infogain_set();
  if (!a.annotations.empty()) {
    const auto records = read_annotations(a.annotations);
    for (DefectKind d : kAllDefects) {
      const auto conf = sanity_confusion(records, d, 1.0);
      bool any = false;
      for (const auto& row : conf) any = any || std::any_of(row.begin(), row.end(), [](double v) { return v > 1.0; });
      SeededRng rng(a.cfg.seed, mix_stream(streams::kInfogain, index_of(d)));
      infogain[index_of(d)] = derive_infogain_matrix(d, any ? std::optional(conf) : std::nullopt, rng);
    }
  }

  const auto result = train(images, [&](std::size_t i) { return load(items[i].path); }, infogain, a.cfg);
  fs::create_directories(a.out_dir);
  const auto prov = provenance(a.cfg.seed);
  auto holistic = result.holistic.model, patch = result.patch.model;
  holistic.provenance = patch.provenance = prov;
  save_model(holistic, fs::path(a.out_dir) / "holistic.dfl");
  save_model(patch, fs::path(a.out_dir) / "patch.dfl");

  auto log_json = [](const TrainingLog& log) {
    json defects = json::array();
    for (DefectKind d : log.defects) defects.push_back(defect_name(d));
    return json{{"defects", defects}, {"epoch_loss", log.epoch_loss}, {"iterations", log.iterations}};
  };
  const json log{{"provenance", prov},
                 {"config", json::parse(config_to_json(a.cfg))},
                 {"images", images.size()},
                 {"augmented_samples", std::accumulate(result.plan.counts.begin(), result.plan.counts.end(), 0L)},
                 {"holistic", log_json(result.holistic.log)},
                 {"patch", log_json(result.patch.log)}};
  write_text(fs::path(a.out_dir) / "train_log.json", log.dump(1) + "\n");
  std::cout << "trained on " << images.size() << " images; models in " << a.out_dir << "\n";
  return 0;
}

// ---- predict --------------------------------------------------------------

struct PredictArgs {
  std::string holistic, patch, image, manifest, images, out;
  int k = 10;
  std::uint64_t seed = 0;
  bool json_out = false;
};

SeededRng predict_rng(std::uint64_t seed, const std::string& id) {
  return SeededRng(seed, mix_stream(streams::kPredict, stable_hash(id)));
}

int run_predict(const PredictArgs& a, const CLI::Option* seed_opt) {
  note_seed(seed_opt, a.seed);
  const auto h = load_model(a.holistic), p = load_model(a.patch);
  check_compatible(h, p);
  if (!a.image.empty()) {
    const fs::path path(a.image);
    auto rng = predict_rng(a.seed, path.stem().string());
    const auto pred = predict(h, p, load(path), a.k, rng);
    if (a.json_out) {
      json scores, hol, pat;
      for (DefectKind d : kAllDefects) {
        const std::string n(defect_name(d));
        scores[n] = pred.scores[index_of(d)];
        hol[n] = pred.holistic[index_of(d)];
        pat[n] = pred.patch[index_of(d)] ? json(*pred.patch[index_of(d)]) : json(nullptr);
      }
      std::cout << json{{"image", path.stem().string()},
                        {"scores", scores},
                        {"holistic", hol},
                        {"patch", pat},
                        {"holistic_only", pred.holistic_only},
                        {"provenance", provenance(a.seed)}}
                       .dump(1)
                << "\n";
    } else {
      if (pred.holistic_only) std::cout << "warning: image smaller than the patch size, holistic scores only\n";
      for (DefectKind d : kAllDefects) {
        std::cout << std::left << std::setw(20) << defect_name(d) << fmt(pred.scores[index_of(d)]) << "\n";
      }
    }
    return 0;
  }

  std::vector<std::pair<std::string, fs::path>> inputs;
  if (!a.manifest.empty()) {
    for (const auto& li : labeled_images(a.manifest, a.images)) inputs.emplace_back(li.id, li.path);
  } else if (!a.images.empty()) {
    for (const auto& pth : list_images(a.images)) inputs.emplace_back(pth.stem().string(), pth);
  } else {
    throw ArgumentError("predict needs --image, --manifest or --images");
  }
  if (a.out.empty()) throw ArgumentError("batch prediction needs --out");
  std::vector<GroundTruthRow> rows(inputs.size());
  int fallbacks = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto rng = predict_rng(a.seed, inputs[i].first);
    const auto pred = predict(h, p, load(inputs[i].second), a.k, rng);
    rows[i].image_id = inputs[i].first;
    for (int d = 0; d < kDefectCount; ++d) rows[i].scores[d] = pred.scores[d];
    fallbacks += pred.holistic_only;
  }
  std::sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) { return x.image_id < y.image_id; });
  write_ground_truth(rows, a.out);
  if (fallbacks) std::cerr << "warning: " << fallbacks << " images were smaller than the patch size\n";
  std::cout << "wrote " << rows.size() << " predictions to " << a.out << "\n";
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, metric = "cross-class-rho", out, label;
  int reps = 15000;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a, const CLI::Option* seed_opt) {
  note_seed(seed_opt, a.seed);
  if (a.metric != "cross-class-rho" && a.metric != "spearman") {
    throw ArgumentError("--metric must be cross-class-rho or spearman");
  }
  const auto gt = read_ground_truth(a.gt);
  std::map<std::string, const GroundTruthRow*> pred;
  const auto pred_rows = read_ground_truth(a.pred);
  for (const auto& r : pred_rows) pred[r.image_id] = &r;

  CrossClassConfig cc;
  cc.repetitions = a.reps;
  cc.seed = a.seed;
  json defects = json::array();
  double sum = 0.0;
  int n = 0;
  for (DefectKind d : kAllDefects) {
    std::vector<double> t, p;
    for (const auto& row : gt) {
      if (!row.scores[index_of(d)]) continue;
      auto it = pred.find(row.image_id);
      if (it == pred.end()) throw DataError("no prediction for image " + row.image_id);
      const auto& v = it->second->scores[index_of(d)];
      if (!v) throw DataError("prediction for " + row.image_id + " has no " + std::string(defect_name(d)) + " score");
      t.push_back(*row.scores[index_of(d)]);
      p.push_back(*v);
    }
    if (t.empty()) continue;
    json entry{{"defect", defect_name(d)}, {"items", t.size()}};
    try {
      if (a.metric == "spearman") {
        const auto r = spearman(t, p);
        entry["value"] = r ? json(*r) : json(nullptr);
        if (r) sum += *r, ++n;
      } else {
        const auto r = cross_class_rho(t, p, d, cc);
        entry["value"] = r.value;
        entry["repetitions_used"] = r.repetitions_used;
        entry["degenerate_count"] = r.degenerate_count;
        entry["std_error"] = r.std_error;
        entry["class_count"] = r.class_count;
        sum += r.value;
        ++n;
      }
    } catch (const MetricUndefined& e) {
      entry["value"] = nullptr;
      entry["error"] = e.what();
    }
    defects.push_back(entry);
  }
  if (defects.empty()) throw DataError("ground truth and predictions share no scored defects");
  const json report{{"metric", a.metric},
                    {"label", a.label.empty() ? fs::path(a.pred).stem().string() : a.label},
                    {"repetitions", a.reps},
                    {"defects", defects},
                    {"mean", n ? json(sum / n) : json(nullptr)},
                    {"provenance", provenance(a.seed)}};
  write_text(a.out, report.dump(1) + "\n");
  for (const auto& e : defects) {
    std::cout << std::left << std::setw(20) << e["defect"].get<std::string>()
              << (e["value"].is_null() ? std::string("undefined") : fmt(e["value"].get<double>())) << "\n";
  }
  std::cout << std::setw(20) << "mean" << (n ? fmt(sum / n) : "undefined") << "\n";
  return 0;
}

// ---- report ---------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
  int precision = 4;
};

int run_report(const ReportArgs& a) {
  std::vector<std::string> columns;
  json rows = json::array();
  for (const auto& path : a.inputs) {
    const auto j = read_json(path);
    std::vector<std::string> names;
    std::vector<json> values;
    try {
      for (const auto& e : j.at("defects")) {
        const auto name = e.at("defect").get<std::string>();
        parse_defect(name);
        names.push_back(name);
        values.push_back(e.at("value"));
      }
    } catch (const json::exception& e) {
      throw SchemaError(path + ": not an eval report: " + e.what());
    } catch (const ArgumentError& e) {
      throw SchemaError(path + ": " + e.what());
    }
    if (columns.empty()) {
      columns = names;
    } else if (names != columns) {
      throw SchemaError(path + " reports defects that differ from " + a.inputs.front());
    }
    double sum = 0.0;
    int n = 0;
    for (const auto& v : values) {
      if (v.is_number()) sum += v.get<double>(), ++n;
    }
    rows.push_back({{"label", j.value("label", fs::path(path).stem().string())},
                    {"values", values},
                    {"mean", n ? json(sum / n) : json(nullptr)}});
  }
  std::ostringstream text;
  std::size_t label_w = 5;
  for (const auto& r : rows) label_w = std::max(label_w, r["label"].get<std::string>().size());
  std::vector<std::size_t> widths;
  text << std::left << std::setw(static_cast<int>(label_w + 2)) << "";
  for (const auto& c : columns) {
    widths.push_back(std::max<std::size_t>(c.size(), a.precision + 3) + 2);
    text << std::setw(static_cast<int>(widths.back())) << c;
  }
  text << "Mean\n";
  auto cell = [&](const json& v) {
    if (v.is_null()) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(a.precision) << v.get<double>();
    return s.str();
  };
  for (const auto& r : rows) {
    text << std::setw(static_cast<int>(label_w + 2)) << r["label"].get<std::string>();
    for (std::size_t i = 0; i < columns.size(); ++i) text << std::setw(static_cast<int>(widths[i])) << cell(r["values"][i]);
    text << cell(r["mean"]) << "\n";
  }
  std::cout << text.str();
  if (!a.out.empty()) {
    json cols = columns;
    cols.push_back("Mean");
    write_text(a.out, json{{"columns", cols}, {"rows", rows}, {"provenance", g_provenance}}.dump(1) + "\n");
  }
  return 0;
}

// ---- baseline / localize / serve -------------------------------------------

struct BaselineArgs {
  std::string method, images, out;
  double blur_reference = kDefaultBlurReference;
};

int run_baseline_cmd(const BaselineArgs& a) {
  const auto kind = parse_baseline(a.method);
  const auto files = list_images(a.images);
  std::vector<double> scores(files.size());
  std::vector<std::string> errors(files.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < files.size(); ++i) {
    try {
      scores[i] = run_baseline(kind, load(files[i]), a.blur_reference);
    } catch (const std::exception& e) {
      errors[i] = files[i].string() + ": " + e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw DecodeError(e);
  }
  std::ofstream out(a.out);
  if (!out) throw IoError("cannot write " + a.out);
  out << "image_id,score\n";
  for (std::size_t i = 0; i < files.size(); ++i) out << files[i].stem().string() << ',' << fmt(scores[i]) << '\n';
  json meta{{"provenance", g_provenance}, {"method", baseline_name(kind)}, {"images", files.size()}};
  if (kind == BaselineKind::BlurHighFreq) meta["blur_reference"] = a.blur_reference;
  write_text(a.out + ".provenance.json", meta.dump(1) + "\n");
  std::cout << "scored " << files.size() << " images with the " << baseline_name(kind) << " baseline\n";
  return 0;
}

struct LocalizeArgs {
  std::string patch, image, defect, out;
  int stride = 0;
};

int run_localize(const LocalizeArgs& a) {
  const auto model = load_model(a.patch);
  const DefectKind d = parse_defect(a.defect);
  const auto heat = localize(model, load(a.image), d, a.stride);
  // Signed defects map [-1, 1] onto the grey range.
  GrayRaster png(heat.width(), heat.height());
  double lo = heat.data()[0], hi = lo, sum = 0.0;
  for (std::size_t i = 0; i < heat.data().size(); ++i) {
    const double v = heat.data()[i];
    lo = std::min(lo, v), hi = std::max(hi, v), sum += v;
    png.data()[i] = is_signed(d) ? (v + 1.0) / 2.0 : v;
  }
  save_gray(png, a.out);
  std::cout << "heat map " << heat.width() << "x" << heat.height() << " min " << fmt(lo) << " max " << fmt(hi)
            << " mean " << fmt(sum / heat.data().size()) << "\n";
  return 0;
}

struct ServeArgs {
  std::string host = "127.0.0.1", images, sanity, store;
  int port = 8080;
  double sanity_fraction = 0.1;
  std::uint64_t seed = 0;
};

int run_serve(const ServeArgs& a, const CLI::Option* seed_opt) {
  note_seed(seed_opt, a.seed);
  ServiceConfig cfg;
  cfg.images_dir = a.images;
  if (!a.sanity.empty()) cfg.sanity = read_sanity_pool(a.sanity);
  cfg.store = a.store;
  cfg.seed = a.seed;
  cfg.sanity_fraction = a.sanity_fraction;
  AnnotationService service(cfg);
  httplib::Server server;
  service.bind(server);
  std::cout << "serving on http://" << a.host << ":" << a.port << " (" << service.record_count()
            << " stored annotations)" << std::endl;
  if (!server.listen(a.host, a.port)) throw IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  g_provenance = command_line(args);

  CLI::App app{"Photographic defect detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  std::string config;
  app.add_option("--threads", threads, "Cap OpenMP threads (0 = runtime default)")->check(CLI::NonNegativeNumber);

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", config, "JSON file of flag values; command-line flags take precedence");
  };
  auto add_seed = [](CLI::App* s, std::uint64_t& seed) {
    return s->add_option("--seed", seed, "Master seed (default 0)");
  };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate graded synthetic defect sequences");
  s_synth->add_option("--base-dir", synth.base_dir, "Base images; generated here when empty")->required();
  s_synth->add_option("--out-dir", synth.out_dir, "Output directory for images and manifest.json")->required();
  s_synth->add_option("--defects", synth.defects, "Comma list of defects or sequences, or 'all'");
  s_synth->add_option("--levels", synth.levels, "'auto' for every level, or a comma list of level indices");
  s_synth->add_option("--count", synth.count, "Number of base images to use or generate");
  s_synth->add_option("--size", synth.size, "Side of generated base images")->check(CLI::Range(32, 4096));
  s_synth->add_option("--style", synth.style, "Generated base style")
      ->check(CLI::IsMember({"natural", "textured", "mixed"}));
  auto* synth_seed = add_seed(s_synth, synth.seed);
  add_config(s_synth);

  AggregateArgs agg;
  auto* s_agg = app.add_subcommand("aggregate", "Accuracy-weighted ground truth from annotation JSONL");
  s_agg->add_option("--annotations", agg.annotations, "Annotation JSONL")->required();
  s_agg->add_option("--out", agg.out, "Ground-truth CSV")->required();
  s_agg->add_option("--min-annotators", agg.min_annotators, "Minimum annotators per (image, defect)")
      ->check(CLI::PositiveNumber);
  s_agg->add_option("--accuracy-out", agg.accuracy_out, "Write per-worker accuracies as JSON");
  s_agg->add_option("--train-out", agg.train_out, "Train split CSV");
  s_agg->add_option("--test-out", agg.test_out, "Test split CSV");
  s_agg->add_option("--train-fraction", agg.train_fraction, "Share of base images in the train split")
      ->check(CLI::Range(0.0, 1.0));
  auto* agg_seed = add_seed(s_agg, agg.seed);
  add_config(s_agg);

  ConsistencyArgs cons;
  auto* s_cons = app.add_subcommand("consistency", "Per-batch annotator agreement (two-vs-three rho, Kendall's W)");
  s_cons->add_option("--annotations", cons.annotations, "Annotation JSONL")->required();
  s_cons->add_option("--out", cons.out, "Report JSON")->required();
  s_cons->add_option("--reps", cons.reps, "Cross-class repetitions")->check(CLI::PositiveNumber);
  s_cons->add_option("--fdr", cons.fdr, "Benjamini-Hochberg FDR level")->check(CLI::Range(0.0, 1.0));
  auto* cons_seed = add_seed(s_cons, cons.seed);
  add_config(s_cons);

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train the holistic and patch columns");
  s_train->add_option("--manifest", tr.manifest, "Synth manifest JSON or ground-truth CSV")->required();
  s_train->add_option("--images", tr.images, "Image directory for a ground-truth CSV manifest");
  s_train->add_option("--out-dir", tr.out_dir, "Writes holistic.dfl, patch.dfl and train_log.json")->required();
  s_train->add_option("--epochs", tr.cfg.epochs, "Training epochs")->check(CLI::PositiveNumber);
  s_train->add_option("--loss", tr.loss, "Training loss")->check(CLI::IsMember({"infogain", "xent", "l2"}));
  s_train->add_option("--batch-size", tr.cfg.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  s_train->add_option("--lr-shared", tr.cfg.lr_shared, "Trunk learning rate");
  s_train->add_option("--head-lr-multiplier", tr.cfg.head_lr_multiplier, "Head learning-rate multiplier");
  s_train->add_option("--lr-decay", tr.cfg.lr_decay, "Learning-rate decay factor");
  s_train->add_option("--lr-decay-every", tr.cfg.lr_decay_every, "Iterations between decays");
  s_train->add_option("--weight-decay", tr.cfg.weight_decay, "L2 weight decay");
  s_train->add_option("--momentum", tr.cfg.momentum, "SGD momentum");
  s_train->add_option("--patch-size", tr.cfg.patch_size, "Patch side in pixels")->check(CLI::Range(8, 1024));
  s_train->add_option("--test-patches", tr.cfg.test_patches, "Patches averaged at prediction time");
  s_train->add_flag("--no-augment", tr.no_augment, "One sample per image instead of the rebalancing plan");
  s_train->add_option("--annotations", tr.annotations, "Derive infogain matrices from these sanity records");
  auto* train_seed = add_seed(s_train, tr.cfg.seed);
  add_config(s_train);

  PredictArgs pr;
  auto* s_pred = app.add_subcommand("predict", "Score images with a trained model pair");
  s_pred->add_option("--holistic", pr.holistic, "Holistic column model")->required();
  s_pred->add_option("--patch", pr.patch, "Patch column model")->required();
  s_pred->add_option("--image", pr.image, "Single image; prints scores");
  s_pred->add_option("--manifest", pr.manifest, "Batch mode: synth manifest or ground-truth CSV");
  s_pred->add_option("--images", pr.images, "Batch mode: every image in a directory");
  s_pred->add_option("--out", pr.out, "Batch mode: prediction CSV");
  s_pred->add_option("--k", pr.k, "Random patches per image")->check(CLI::PositiveNumber);
  s_pred->add_flag("--json", pr.json_out, "Print JSON for a single image");
  auto* pred_seed = add_seed(s_pred, pr.seed);
  add_config(s_pred);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Score predictions against ground truth");
  s_eval->add_option("--pred", ev.pred, "Prediction CSV")->required();
  s_eval->add_option("--gt", ev.gt, "Ground-truth CSV")->required();
  s_eval->add_option("--metric", ev.metric, "cross-class-rho or spearman")
      ->check(CLI::IsMember({"cross-class-rho", "spearman"}));
  s_eval->add_option("--reps", ev.reps, "Cross-class repetitions")->check(CLI::PositiveNumber);
  s_eval->add_option("--out", ev.out, "Report JSON")->required();
  s_eval->add_option("--label", ev.label, "Row label used by report (default: prediction file stem)");
  auto* eval_seed = add_seed(s_eval, ev.seed);
  add_config(s_eval);

  BaselineArgs bl;
  auto* s_base = app.add_subcommand("baseline", "Single-defect reference estimators");
  s_base->add_option("--method", bl.method, "Estimator")->required()->check(CLI::IsMember({"noise", "blur", "haze"}));
  s_base->add_option("--images", bl.images, "Image directory")->required();
  s_base->add_option("--out", bl.out, "CSV of image_id,score")->required();
  s_base->add_option("--blur-reference", bl.blur_reference, "Sharpness of a crisp image for the blur score");
  add_config(s_base);

  LocalizeArgs lo;
  auto* s_loc = app.add_subcommand("localize", "Sliding-window defect heat map");
  s_loc->add_option("--patch", lo.patch, "Patch column model")->required();
  s_loc->add_option("--image", lo.image, "Input image")->required();
  s_loc->add_option("--defect", lo.defect, "Defect name")->required();
  s_loc->add_option("--stride", lo.stride, "Window stride (default: half the patch size)")->check(CLI::PositiveNumber);
  s_loc->add_option("--out", lo.out, "Heat map PNG")->required();
  add_config(s_loc);

  ServeArgs sv;
  auto* s_serve = app.add_subcommand("serve", "Annotation HTTP service");
  s_serve->add_option("--port", sv.port, "TCP port")->check(CLI::Range(1, 65535));
  s_serve->add_option("--host", sv.host, "Bind address");
  s_serve->add_option("--images", sv.images, "Image pool directory")->required();
  s_serve->add_option("--sanity", sv.sanity, "Sanity pool JSONL");
  s_serve->add_option("--store", sv.store, "Append-only annotation log")->required();
  s_serve->add_option("--sanity-fraction", sv.sanity_fraction, "Share of each session drawn from the sanity pool")
      ->check(CLI::Range(0.0, 0.99));
  auto* serve_seed = add_seed(s_serve, sv.seed);
  add_config(s_serve);

  ReportArgs rp;
  auto* s_rep = app.add_subcommand("report", "Tabulate eval reports, one row each");
  s_rep->add_option("inputs", rp.inputs, "Eval report JSON files")->required();
  s_rep->add_option("--out", rp.out, "Table JSON");
  s_rep->add_option("--precision", rp.precision, "Decimals in the text table")->check(CLI::Range(0, 12));
  add_config(s_rep);

  try {
    // A config file contributes the flags the command line leaves unset.
    std::vector<std::string> tail(args.begin() + std::min<std::size_t>(1, args.size()), args.end());
    std::string config_path, sub_name;
    for (std::size_t i = 0; i < tail.size(); ++i) {
      if (tail[i] == "--config" && i + 1 < tail.size()) config_path = tail[i + 1];
      if (tail[i].rfind("--config=", 0) == 0) config_path = tail[i].substr(9);
      if (sub_name.empty() && !tail[i].empty() && tail[i][0] != '-' && app.get_subcommand_no_throw(tail[i])) {
        sub_name = tail[i];
      }
    }
    if (!config_path.empty() && !sub_name.empty()) {
      const bool wants_help = std::any_of(tail.begin(), tail.end(), [](const auto& t) { return t == "--help" || t == "-h"; });
      if (!wants_help) {
        for (auto& extra : config_arguments(*app.get_subcommand(sub_name), tail, config_path)) tail.push_back(extra);
      }
    }
    std::reverse(tail.begin(), tail.end());
    app.parse(tail);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }

  if (threads > 0) omp_set_num_threads(threads);
  try {
    if (*s_synth) return run_synth(synth, synth_seed);
    if (*s_agg) return run_aggregate(agg, agg_seed);
    if (*s_cons) return run_consistency(cons, cons_seed);
    if (*s_train) return run_train(tr, train_seed);
    if (*s_pred) return run_predict(pr, pred_seed);
    if (*s_eval) return run_eval(ev, eval_seed);
    if (*s_base) return run_baseline_cmd(bl);
    if (*s_loc) return run_localize(lo);
    if (*s_serve) return run_serve(sv, serve_seed);
    if (*s_rep) return run_report(rp);
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 4;
}

}  // namespace dfl
