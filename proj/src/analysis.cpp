#include "mexp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <set>
#include <tuple>

#include <fmt/format.h>

#include "mexp/csv.hpp"
#include "mexp/numtheory.hpp"

namespace mexp {

void AccuracySeries::validate() const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].n_samples < 1) {
      throw DataError(fmt::format("series {}: epoch {} has no samples", modulus, points[i].epoch));
    }
    if (i > 0 && points[i].epoch <= points[i - 1].epoch) {
      throw DataError(fmt::format("series {}: epochs not strictly increasing at {}", modulus,
                                  points[i].epoch));
    }
  }
}

std::map<std::uint64_t, ModulusTally> per_modulus_tally(std::span<const Prediction> predictions) {
  std::map<std::uint64_t, ModulusTally> out;
  for (const auto& p : predictions) {
    auto& t = out[p.instance.c];
    ++t.total;
    if (p.correct()) {
      ++t.correct;
    }
  }
  return out;
}

std::map<std::uint64_t, double> per_modulus_accuracy(std::span<const Prediction> predictions) {
  if (predictions.empty()) {
    throw DataError("per_modulus_accuracy: no predictions");
  }
  std::map<std::uint64_t, double> out;
  for (const auto& [c, t] : per_modulus_tally(predictions)) {
    out[c] = static_cast<double>(t.correct) / static_cast<double>(t.total);
  }
  return out;
}

std::map<std::uint64_t, AccuracySeries> read_modulus_series(const std::filesystem::path& csv_path,
                                                            Split split) {
  const auto table = csv::read(csv_path);
  const auto col_epoch = table.column("epoch");
  const auto col_split = table.column("split");
  const auto col_mod = table.column("modulus");
  const auto col_correct = table.column("correct");
  const auto col_total = table.column("total");
  const std::string wanted = to_string(split);
  std::map<std::uint64_t, AccuracySeries> out;
  for (const auto& row : table.rows) {
    if (row[col_split] != wanted) {
      continue;
    }
    try {
      const auto c = std::stoull(row[col_mod]);
      const auto correct = std::stoull(row[col_correct]);
      const auto total = std::stoull(row[col_total]);
      auto& s = out[c];
      s.modulus = c;
      s.points.push_back({std::stoi(row[col_epoch]),
                          total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total),
                          total});
    } catch (const std::logic_error&) {
      throw DataError("per-modulus file " + csv_path.string() + ": malformed numeric cell");
    }
  }
  for (auto& [c, s] : out) {
    s.validate();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grokking detection

namespace {

// Accuracy at the last recorded epoch <= e (points sorted by epoch).
double accuracy_at(const std::vector<SeriesPoint>& pts, int e) {
  auto it = std::upper_bound(pts.begin(), pts.end(), e,
                             [](int epoch, const SeriesPoint& p) { return epoch < p.epoch; });
  if (it == pts.begin()) {
    return pts.front().accuracy;
  }
  return std::prev(it)->accuracy;
}

}  // namespace

std::vector<GrokEvent> detect_grokking(const AccuracySeries& series, const GrokParams& params) {
  if (params.window < 1 || params.sustain < 0) {
    throw UsageError("detect_grokking: window must be >= 1 and sustain >= 0");
  }
  series.validate();
  const auto& pts = series.points;
  if (pts.size() < static_cast<std::size_t>(params.window + params.sustain)) {
    throw DataError(fmt::format("detect_grokking: series {} has {} points, needs at least {}",
                                series.modulus, pts.size(), params.window + params.sustain));
  }
  const int last = pts.back().epoch;
  const double hold_margin = 0.75 * params.jump_threshold;

  std::vector<GrokEvent> events;
  int next_allowed = pts.front().epoch;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const int t = pts[i].epoch;
    if (t < next_allowed) {
      continue;
    }
    const int end = t + params.window;
    if (end > last) {
      break;
    }
    const double base = pts[i].accuracy;
    const double jump = accuracy_at(pts, end) - base;
    if (jump < params.jump_threshold) {
      continue;
    }
    bool holds = true;
    for (std::size_t k = i; k < pts.size() && pts[k].epoch <= end + params.sustain; ++k) {
      if (pts[k].epoch > end && pts[k].accuracy < base + hold_margin) {
        holds = false;
        break;
      }
    }
    if (!holds) {
      continue;
    }
    int onset = end;
    for (std::size_t k = i; k < pts.size() && pts[k].epoch <= end; ++k) {
      if (pts[k].accuracy >= base + jump / 2) {
        onset = pts[k].epoch;
        break;
      }
    }
    events.push_back({series.modulus, onset, jump, end + params.sustain <= last});
    next_allowed = end + 1;
  }
  return events;
}

// ---------------------------------------------------------------------------
// Family synchronization

std::vector<Family> family_sync_report(std::span<const GrokEvent> events, int sync_window) {
  if (sync_window < 0) {
    throw UsageError("family_sync_report: sync_window must be >= 0");
  }
  // Event order by (onset, modulus) gives stable indices for membership.
  std::vector<std::size_t> order(events.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return std::tie(events[x].onset_epoch, events[x].modulus) <
           std::tie(events[y].onset_epoch, events[y].modulus);
  });

  std::set<std::uint64_t> primes;
  for (const auto& e : events) {
    for (const auto p : numtheory::prime_factors(e.modulus)) {
      primes.insert(p);
    }
  }

  std::vector<Family> families;
  std::set<std::vector<std::size_t>> seen;
  std::vector<char> grouped(events.size(), 0);
  for (const auto p : primes) {
    std::vector<std::size_t> members;
    for (const auto i : order) {
      if (events[i].modulus % p == 0) {
        members.push_back(i);
      }
    }
    std::size_t k = 0;
    while (k < members.size()) {
      const int first = events[members[k]].onset_epoch;
      std::vector<std::size_t> cluster;
      while (k < members.size() && events[members[k]].onset_epoch <= first + sync_window) {
        cluster.push_back(members[k]);
        ++k;
      }
      if (cluster.size() < 2) {
        continue;
      }
      auto key = cluster;
      std::sort(key.begin(), key.end());
      if (!seen.insert(key).second) {
        continue;
      }
      Family f;
      f.prime = p;
      for (const auto i : cluster) {
        f.moduli.push_back(events[i].modulus);
        f.onsets.push_back(events[i].onset_epoch);
        grouped[i] = 1;
      }
      f.spread = f.onsets.back() - f.onsets.front();
      families.push_back(std::move(f));
    }
  }
  std::stable_sort(families.begin(), families.end(), [](const Family& x, const Family& y) {
    return std::tie(x.prime, x.onsets.front()) < std::tie(y.prime, y.onsets.front());
  });
  for (const auto i : order) {
    if (grouped[i] == 0) {
      families.push_back({0, {events[i].modulus}, {events[i].onset_epoch}, 0, true});
    }
  }
  return families;
}

// ---------------------------------------------------------------------------
// Misprediction census

std::string prediction_key(const Prediction& p) {
  return p.predicted ? std::to_string(*p.predicted) : std::string("malformed");
}

std::vector<Confusion> misprediction_census(std::span<const Prediction> predictions,
                                            std::uint64_t min_support) {
  using Tuple = std::tuple<std::uint64_t, std::uint64_t, std::uint64_t>;
  struct Acc {
    Confusion c;
    std::set<Tuple> distinct;
    std::map<std::string, std::set<Tuple>> distinct_by_key;
  };
  std::map<std::uint64_t, Acc> by_target;
  for (const auto& p : predictions) {
    auto& acc = by_target[p.instance.d];
    const Tuple tuple{p.instance.a, p.instance.b, p.instance.c};
    const std::string key = prediction_key(p);
    acc.c.target = p.instance.d;
    ++acc.c.support;
    ++acc.c.histogram[key];
    acc.distinct.insert(tuple);
    if (p.correct()) {
      ++acc.c.correct;
    } else {
      acc.distinct_by_key[key].insert(tuple);
    }
  }
  std::vector<Confusion> out;
  for (auto& [target, acc] : by_target) {
    auto& c = acc.c;
    if (c.support < min_support || c.correct == c.support) {
      continue;
    }
    c.distinct_support = acc.distinct.size();
    const std::string correct_key = std::to_string(target);
    for (const auto& [key, count] : c.histogram) {
      if (key == correct_key) {
        continue;
      }
      // Numeric keys compare by value; "malformed" sorts last.
      const auto numeric = [](const std::string& s) {
        return s == "malformed" ? std::numeric_limits<std::uint64_t>::max() : std::stoull(s);
      };
      if (count > c.dominant_count ||
          (count == c.dominant_count && numeric(key) < numeric(c.dominant))) {
        c.dominant = key;
        c.dominant_count = count;
      }
    }
    c.dominant_share = static_cast<double>(c.dominant_count) / static_cast<double>(c.support);
    c.dominant_distinct = acc.distinct_by_key[c.dominant].size();
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Writers

namespace {

template <class T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) {
      out += ';';
    }
    out += std::to_string(values[i]);
  }
  return out;
}

}  // namespace

void write_grok_events_csv(std::ostream& out, std::span<const GrokEvent> events) {
  csv::write_row(out, {"modulus", "onset_epoch", "jump", "sustained"});
  for (const auto& e : events) {
    csv::write_row(out, {std::to_string(e.modulus), std::to_string(e.onset_epoch),
                         fmt::format("{:.6f}", e.jump), e.sustained ? "true" : "false"});
  }
}

void write_families_csv(std::ostream& out, std::span<const Family> families) {
  csv::write_row(out, {"prime", "moduli", "onsets", "spread", "singleton"});
  for (const auto& f : families) {
    csv::write_row(out, {std::to_string(f.prime), join(f.moduli), join(f.onsets),
                         std::to_string(f.spread), f.singleton ? "true" : "false"});
  }
}

void write_confusions_csv(std::ostream& out, std::span<const Confusion> confusions) {
  csv::write_row(out, {"target", "support", "distinct_support", "correct", "dominant_prediction",
                       "dominant_count", "dominant_share", "dominant_distinct"});
  for (const auto& c : confusions) {
    csv::write_row(out, {std::to_string(c.target), std::to_string(c.support),
                         std::to_string(c.distinct_support), std::to_string(c.correct), c.dominant,
                         std::to_string(c.dominant_count), fmt::format("{:.6f}", c.dominant_share),
                         std::to_string(c.dominant_distinct)});
  }
}

void write_confusion_histogram_csv(std::ostream& out, std::span<const Confusion> confusions) {
  csv::write_row(out, {"target", "prediction", "count", "share"});
  for (const auto& c : confusions) {
    for (const auto& [key, count] : c.histogram) {
      csv::write_row(out, {std::to_string(c.target), key, std::to_string(count),
                           fmt::format("{:.6f}", static_cast<double>(count) /
                                                     static_cast<double>(c.support))});
    }
  }
}

void write_predictions_csv(std::ostream& out, std::span<const Prediction> predictions) {
  csv::write_row(out, {"a", "b", "c", "d", "prediction", "correct"});
  for (const auto& p : predictions) {
    csv::write_row(out, {std::to_string(p.instance.a), std::to_string(p.instance.b),
                         std::to_string(p.instance.c), std::to_string(p.instance.d),
                         prediction_key(p), p.correct() ? "1" : "0"});
  }
}

void write_series_csv(std::ostream& out, const std::map<std::uint64_t, AccuracySeries>& series) {
  csv::write_row(out, {"modulus", "epoch", "accuracy", "n_samples"});
  for (const auto& [c, s] : series) {
    for (const auto& p : s.points) {
      csv::write_row(out, {std::to_string(c), std::to_string(p.epoch),
                           fmt::format("{:.6f}", p.accuracy), std::to_string(p.n_samples)});
    }
  }
}

void write_line_chart_svg(std::ostream& out, const std::string& title,
                          std::span<const ChartLine> lines) {
  constexpr double width = 720;
  constexpr double height = 420;
  constexpr double left = 50;
  constexpr double right = 150;
  constexpr double top = 30;
  constexpr double bottom = 40;
  double x_min = 0;
  double x_max = 1;
  bool any = false;
  for (const auto& line : lines) {
    for (const auto& [x, y] : line.points) {
      x_min = any ? std::min(x_min, x) : x;
      x_max = any ? std::max(x_max, x) : x;
      any = true;
    }
  }
  if (x_max <= x_min) {
    x_max = x_min + 1;
  }
  const double pw = width - left - right;
  const double ph = height - top - bottom;
  auto sx = [&](double x) { return left + (x - x_min) / (x_max - x_min) * pw; };
  auto sy = [&](double y) { return top + (1.0 - std::clamp(y, 0.0, 1.0)) * ph; };

  out << fmt::format(R"svg(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">)svg",
                     width, height)
      << '\n';
  out << fmt::format(R"svg(<text x="{}" y="18" font-size="14">{}</text>)svg", left, title) << '\n';
  out << fmt::format(R"svg(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>)svg",
                     left, top, pw, ph)
      << '\n';
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0;
    out << fmt::format(R"svg(<text x="{}" y="{:.1f}" text-anchor="end">{:.2f}</text>)svg", left - 4,
                       sy(y) + 4, y)
        << '\n';
  }
  out << fmt::format(R"svg(<text x="{}" y="{}">{}</text>)svg", left, height - 10, x_min) << '\n';
  out << fmt::format(R"svg(<text x="{}" y="{}" text-anchor="end">{}</text>)svg", left + pw, height - 10,
                     x_max)
      << '\n';
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const double hue = std::fmod(static_cast<double>(i) * 137.508, 360.0);
    std::string pts;
    for (const auto& [x, y] : lines[i].points) {
      pts += fmt::format("{:.1f},{:.1f} ", sx(x), sy(y));
    }
    out << fmt::format(R"svg(<polyline fill="none" stroke="hsl({:.0f},70%,45%)" stroke-width="1.5" points="{}"/>)svg",
                       hue, pts)
        << '\n';
    out << fmt::format(R"svg(<text x="{}" y="{}" fill="hsl({:.0f},70%,45%)">{}</text>)svg",
                       left + pw + 8, top + 12 + 13 * static_cast<double>(i), hue, lines[i].label)
        << '\n';
  }
  out << "</svg>\n";
}

}  // namespace mexp
