#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfl/core.hpp"
#include "dfl/metrics.hpp"

namespace dfl {

struct AnnotationRecord {
  std::string image_id;
  std::string worker_id;
  DefectKind defect = DefectKind::BadExposure;
  double level = 0.0;
  bool is_sanity = false;
  std::optional<double> known_level;
  std::string ts;       // ISO-8601 UTC
  std::string session;  // empty outside the annotation service
};

// One JSON object per line:
// {"image_id","worker_id","defect","level","is_sanity","known_level"?,"ts"}.
std::string to_jsonl(const AnnotationRecord& r);
// Validates levels against the defect's discrete set; SchemaError otherwise.
AnnotationRecord parse_annotation(std::string_view line);
std::vector<AnnotationRecord> read_annotations(std::istream& in);
std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path);
void write_annotations(std::span<const AnnotationRecord> records, std::ostream& out);

struct WorkerAccuracy {
  std::string worker_id;
  DefectKind defect;
  double accuracy;
  int sanity_count;  // sanity items for this (worker, defect)
};

// Exact-match fraction on sanity items per (worker, defect). Fewer than 3
// per-defect items fall back to the worker's pooled accuracy, then to the
// global mean for the defect, then to 1.0 when there is no sanity data at all.
// Sorted by (worker_id, defect).
std::vector<WorkerAccuracy> compute_worker_accuracy(std::span<const AnnotationRecord> records);

struct AggregatedLabel {
  std::string image_id;
  DefectKind defect;
  double score;
  std::vector<std::pair<std::string, double>> contributor_weights;
};

struct AggregationReject {
  std::string image_id;
  DefectKind defect;
  int annotators;
};

struct AggregationResult {
  std::vector<AggregatedLabel> labels;  // sorted by (image_id, defect)
  std::vector<AggregationReject> rejects;
};

AggregationResult aggregate_labels(std::span<const AnnotationRecord> records,
                                   std::span<const WorkerAccuracy> accuracies,
                                   int min_annotators = 5);

// Ground-truth table: one row per image, one optional score per defect.
struct GroundTruthRow {
  std::string image_id;
  std::array<std::optional<double>, kDefectCount> scores;
};

std::vector<GroundTruthRow> to_ground_truth(std::span<const AggregatedLabel> labels);
void write_ground_truth(std::span<const GroundTruthRow> rows, const std::filesystem::path& path);
// Header must be image_id followed by the seven defect names in canonical
// order; empty cells are missing scores. Also reads prediction CSVs.
std::vector<GroundTruthRow> read_ground_truth(const std::filesystem::path& path);

// Synthetic ids "<base>__<sequence>_<level>" map to <base>; others to themselves.
std::string base_image_id(std::string_view image_id);

struct DatasetSplit {
  std::vector<std::size_t> train;  // indices into the input, ascending
  std::vector<std::size_t> test;
};

// Shuffles the distinct base ids and assigns round(fraction * bases) of them
// to train, so all variants of one base land on the same side.
DatasetSplit split_dataset(std::span<const std::string> image_ids, double train_fraction,
                           SeededRng& rng);

// Known level (rows) by chosen level (columns) over sanity records, indexed by
// the defect's annotation levels.
std::vector<std::vector<double>> sanity_confusion(std::span<const AnnotationRecord> records,
                                                  DefectKind defect, double pseudo_count = 0.0);

struct AnnotationBatch {
  std::string batch_id;
  std::vector<std::string> workers;  // sorted
  std::vector<std::string> images;   // sorted
};

// Groups non-sanity records by the exact set of workers that annotated each
// image.
std::vector<AnnotationBatch> infer_batches(std::span<const AnnotationRecord> records);

struct BatchDefectConsistency {
  std::optional<double> rho;  // mean over non-degenerate two-vs-three splits
  int splits_used = 0;
  int splits_degenerate = 0;
  std::optional<double> rho_p_value;
  std::optional<double> w;
  std::optional<double> w_p_value;
  bool rho_significant = false;
  bool w_significant = false;
  int images = 0;
};

struct BatchConsistency {
  AnnotationBatch batch;
  bool malformed = false;  // not exactly five workers
  std::array<BatchDefectConsistency, kDefectCount> defects;
};

struct DefectConsistencySummary {
  std::optional<double> mean_rho;
  std::optional<double> mean_w;
  double pct_significant_rho = 0.0;
  double pct_significant_w = 0.0;
  int batches_rho = 0;
  int batches_w = 0;
  int degenerate_batches = 0;
};

struct ConsistencyReport {
  std::vector<BatchConsistency> batches;
  std::array<DefectConsistencySummary, kDefectCount> defects;
  int malformed_batches = 0;
};

struct ConsistencyConfig {
  CrossClassConfig rho{};
  double fdr_q = 0.05;
};

ConsistencyReport consistency_analysis(std::span<const AnnotationRecord> records,
                                       const ConsistencyConfig& cfg = {});

std::string consistency_report_json(const ConsistencyReport& report);

}  // namespace dfl
