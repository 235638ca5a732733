#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mexp/trainer.hpp"

// Learning-dynamics post-processing over metric files and prediction lists.
namespace mexp {

struct SeriesPoint {
  int epoch = 0;
  double accuracy = 0.0;
  std::uint64_t n_samples = 0;
};

struct AccuracySeries {
  std::uint64_t modulus = 0;
  std::vector<SeriesPoint> points;

  /// Throws DataError unless epochs strictly increase and every n_samples >= 1.
  void validate() const;
};

/// Correct/total per modulus; malformed predictions count as incorrect.
std::map<std::uint64_t, ModulusTally> per_modulus_tally(std::span<const Prediction> predictions);

/// Throws DataError on an empty prediction list.
std::map<std::uint64_t, double> per_modulus_accuracy(std::span<const Prediction> predictions);

/// Per-modulus series for one split of a per_modulus.csv file.
std::map<std::uint64_t, AccuracySeries> read_modulus_series(const std::filesystem::path& csv_path,
                                                            Split split);

struct GrokParams {
  double jump_threshold = 0.4;
  int window = 25;
  int sustain = 50;
};

struct GrokEvent {
  std::uint64_t modulus = 0;
  int onset_epoch = 0;
  double jump = 0.0;
  /// False when the series ends before the sustain period is complete.
  bool sustained = false;
};

/// A candidate epoch t qualifies when acc(t + window) - acc(t) >= threshold
/// and accuracy then stays >= acc(t) + 0.75 * threshold for `sustain` epochs.
/// Candidates are scanned earliest first; after an event, candidates within
/// `window` epochs are absorbed into it. The reported onset is the first
/// epoch in [t, t + window] reaching acc(t) + jump / 2. acc(e) is the value
/// at the last recorded epoch <= e. Throws DataError when the series has
/// fewer than window + sustain points.
std::vector<GrokEvent> detect_grokking(const AccuracySeries& series, const GrokParams& params = {});

struct Family {
  std::uint64_t prime = 0;  // 0 for a singleton without a shared factor
  std::vector<std::uint64_t> moduli;
  std::vector<int> onsets;
  int spread = 0;
  bool singleton = false;
};

/// For each prime, events whose modulus it divides are clustered from the
/// earliest onset: a cluster holds the events with onset <= first + window.
/// Clusters of two or more are families; a member set found under several
/// primes is reported once, under the smallest. Events in no family become
/// singletons. Families come first, ordered by (prime, first onset).
std::vector<Family> family_sync_report(std::span<const GrokEvent> events, int sync_window = 25);

struct Confusion {
  std::uint64_t target = 0;
  std::uint64_t support = 0;           // raw rows with this target
  std::uint64_t distinct_support = 0;  // distinct (a, b, c) among them
  std::uint64_t correct = 0;
  /// Prediction key -> row count. Keys are decimal values or "malformed".
  std::map<std::string, std::uint64_t> histogram;
  std::string dominant;  // most frequent wrong prediction
  std::uint64_t dominant_count = 0;
  double dominant_share = 0.0;  // over all rows for the target
  std::uint64_t dominant_distinct = 0;
};

/// Targets with >= min_support rows and at least one wrong prediction,
/// ordered by target. Ties for the dominant key go to the smaller key.
std::vector<Confusion> misprediction_census(std::span<const Prediction> predictions,
                                            std::uint64_t min_support = 10);

std::string prediction_key(const Prediction& p);

void write_grok_events_csv(std::ostream& out, std::span<const GrokEvent> events);
void write_families_csv(std::ostream& out, std::span<const Family> families);
void write_confusions_csv(std::ostream& out, std::span<const Confusion> confusions);
void write_confusion_histogram_csv(std::ostream& out, std::span<const Confusion> confusions);
void write_predictions_csv(std::ostream& out, std::span<const Prediction> predictions);
void write_series_csv(std::ostream& out, const std::map<std::uint64_t, AccuracySeries>& series);

struct ChartLine {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Minimal standalone SVG line chart with a y range of [0, 1].
void write_line_chart_svg(std::ostream& out, const std::string& title,
                          std::span<const ChartLine> lines);

}  // namespace mexp
