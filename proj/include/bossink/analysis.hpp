#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bossink/corpus.hpp"
#include "bossink/error.hpp"
#include "bossink/metrics.hpp"
#include "bossink/model.hpp"

namespace bossink {

// Population coefficient of variation sigma / mu.
inline double cv(std::span<const double> values) {
  if (values.empty()) throw InputError("cv: no values");
  double mu = 0.0;
  for (double v : values) mu += v;
  mu /= static_cast<double>(values.size());
  if (mu == 0.0) throw UndefinedScoreError("cv: mean is zero");
  double var = 0.0;
  for (double v : values) var += (v - mu) * (v - mu);
  var /= static_cast<double>(values.size());
  return std::sqrt(var) / mu;
}

struct LengthPoint {
  std::size_t seq_len = 0;
  double score = 0.0;
};

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

// Ordinary least squares of score on seq_len.
inline LineFit regression_slope(std::span<const LengthPoint> points) {
  if (points.size() < 2) throw DegenerateFitError("regression: need at least two points");
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (const auto& p : points) {
    mx += static_cast<double>(p.seq_len);
    my += p.score;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& p : points) {
    const double dx = static_cast<double>(p.seq_len) - mx;
    sxx += dx * dx;
    sxy += dx * (p.score - my);
  }
  if (sxx == 0.0) throw DegenerateFitError("regression: all sequence lengths are equal");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

struct LengthSeries {
  HeadId head;
  std::vector<LengthPoint> points;  // ascending, distinct seq_len
  double mu = 0.0;
  double sigma = 0.0;
  std::optional<double> cv;  // empty when mu == 0
  double slope = 0.0;
  double intercept = 0.0;
};

inline LengthSeries make_length_series(HeadId head, std::vector<LengthPoint> points) {
  std::sort(points.begin(), points.end(),
            [](const LengthPoint& a, const LengthPoint& b) { return a.seq_len < b.seq_len; });
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].seq_len == points[i - 1].seq_len) {
      throw InputError("length series: duplicate length " + std::to_string(points[i].seq_len));
    }
  }
  LengthSeries s;
  s.head = head;
  s.points = std::move(points);
  std::vector<double> scores;
  for (const auto& p : s.points) scores.push_back(p.score);
  if (scores.empty()) throw InputError("length series: no points");
  for (double v : scores) s.mu += v;
  s.mu /= static_cast<double>(scores.size());
  double var = 0.0;
  for (double v : scores) var += (v - s.mu) * (v - s.mu);
  s.sigma = std::sqrt(var / static_cast<double>(scores.size()));
  if (s.mu != 0.0) s.cv = s.sigma / s.mu;
  const auto fit = regression_slope(s.points);
  s.slope = fit.slope;
  s.intercept = fit.intercept;
  return s;
}

// BOS head scores at several prompt lengths. The prompts at every length are
// prefixes of the same windows cut at the longest length, so content is
// shared across lengths.
inline std::map<HeadId, LengthSeries> length_sweep(const Checkpoint& ck,
                                                   const std::vector<TokenId>& corpus,
                                                   std::vector<std::size_t> lengths,
                                                   std::size_t n_prompts, std::uint64_t seed,
                                                   int threads = 1) {
  std::sort(lengths.begin(), lengths.end());
  lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
  if (lengths.size() < 2) throw InputError("length_sweep: need at least two distinct lengths");
  if (n_prompts == 0) throw InputError("length_sweep: need at least one prompt");
  if (lengths.front() == 0) throw InputError("length_sweep: lengths must be positive");
  for (auto T : lengths) {
    if (T > ck.config.max_seq_len) {
      throw InputError("length_sweep: length " + std::to_string(T) + " exceeds max_seq_len " +
                       std::to_string(ck.config.max_seq_len));
    }
  }
  const auto windows = cut_prompts(corpus, n_prompts, lengths.back(), seed);
  std::map<HeadId, std::vector<LengthPoint>> points;
  for (auto T : lengths) {
    std::vector<Prompt> prompts;
    for (const auto& w : windows) prompts.emplace_back(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(T));
    const auto table = scan_model(ck, prompts, Metric::bos_head, threads);
    for (const auto& e : table.entries) points[{e.layer, *e.head}].push_back({T, e.score});
  }
  std::map<HeadId, LengthSeries> out;
  for (auto& [id, pts] : points) out.emplace(id, make_length_series(id, std::move(pts)));
  return out;
}

// Regression of the cohort-mean score against length for heads whose mean
// score over the sweep is at least `min_mu`.
struct CohortFit {
  std::string name;
  double min_mu = 0.0;
  std::size_t n_heads = 0;
  std::optional<LineFit> fit;  // empty when the cohort is empty
  double mean_cv = 0.0;
};

inline CohortFit cohort_regression(const std::map<HeadId, LengthSeries>& series, double min_mu,
                                   std::string name) {
  CohortFit out{std::move(name), min_mu, 0, std::nullopt, 0.0};
  std::map<std::size_t, double> sums;
  std::size_t with_cv = 0;
  for (const auto& [id, s] : series) {
    if (s.mu < min_mu) continue;
    ++out.n_heads;
    for (const auto& p : s.points) sums[p.seq_len] += p.score;
    if (s.cv) {
      out.mean_cv += *s.cv;
      ++with_cv;
    }
  }
  if (with_cv) out.mean_cv /= static_cast<double>(with_cv);
  if (out.n_heads == 0) return out;
  std::vector<LengthPoint> means;
  for (const auto& [T, sum] : sums) means.push_back({T, sum / static_cast<double>(out.n_heads)});
  out.fit = regression_slope(means);
  return out;
}

// The three cohorts: all heads, mu >= 0.6 and mu >= 0.8.
inline std::vector<CohortFit> standard_cohorts(const std::map<HeadId, LengthSeries>& series) {
  return {cohort_regression(series, -std::numeric_limits<double>::infinity(), "all"),
          cohort_regression(series, 0.6, "mu>=0.6"), cohort_regression(series, 0.8, "mu>=0.8")};
}

// ---------------------------------------------------------------------------
// Attention-pattern taxonomy

enum class PatternKind { bos_sink, diagonal, uniform, random };

inline std::string to_string(PatternKind k) {
  switch (k) {
    case PatternKind::bos_sink: return "bos_sink";
    case PatternKind::diagonal: return "diagonal";
    case PatternKind::uniform: return "uniform";
    case PatternKind::random: return "random";
  }
  return "?";
}

struct PatternThresholds {
  double bos = 0.6;
  double diagonal = 0.5;
  double entropy = 0.9;
};

struct PatternDiagnostics {
  double s_bos = 0.0;
  double diag_mass = 0.0;
  double entropy_ratio = 0.0;
};

struct PatternLabel {
  PatternKind kind = PatternKind::random;
  PatternDiagnostics diagnostics;
};

// Mean normalized row entropy H(row) / log(t + 1) over rows with more than
// one admissible key. A single-row map counts as perfectly uniform.
inline double row_entropy_ratio(const Tensor& attn) {
  const std::size_t T = attn.rows();
  if (T < 2) return 1.0;
  double total = 0.0;
  for (std::size_t t = 1; t < T; ++t) {
    double h = 0.0;
    for (std::size_t k = 0; k <= t; ++k) {
      const double p = attn(t, k);
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h / std::log(static_cast<double>(t + 1));
  }
  return total / static_cast<double>(T - 1);
}

inline double diagonal_mass(const Tensor& attn) {
  double sum = 0.0;
  for (std::size_t t = 0; t < attn.rows(); ++t) sum += attn(t, t);
  return sum / static_cast<double>(attn.rows());
}

inline PatternDiagnostics pattern_diagnostics(std::span<const Tensor> maps) {
  if (maps.empty()) throw InputError("classify_pattern: no attention maps");
  PatternDiagnostics d;
  for (const auto& m : maps) {
    if (m.rank() != 2 || m.rows() != m.cols()) {
      throw DimensionError("classify_pattern: attention map must be square");
    }
    d.s_bos += sink_score(m, 0);
    d.diag_mass += diagonal_mass(m);
    d.entropy_ratio += row_entropy_ratio(m);
  }
  const double n = static_cast<double>(maps.size());
  d.s_bos /= n;
  d.diag_mass /= n;
  d.entropy_ratio /= n;
  return d;
}

// Fixed precedence: bos_sink, then diagonal, then uniform, else random.
inline PatternKind classify(const PatternDiagnostics& d, const PatternThresholds& th = {}) {
  if (d.s_bos >= th.bos) return PatternKind::bos_sink;
  if (d.diag_mass >= th.diagonal) return PatternKind::diagonal;
  if (d.entropy_ratio >= th.entropy) return PatternKind::uniform;
  return PatternKind::random;
}

inline PatternLabel classify_pattern(std::span<const Tensor> maps, const PatternThresholds& th = {}) {
  PatternLabel label;
  label.diagnostics = pattern_diagnostics(maps);
  label.kind = classify(label.diagnostics, th);
  return label;
}

// Labels every head of a model from its attention maps over `prompts`.
inline std::map<HeadId, PatternLabel> classify_model(const Checkpoint& ck,
                                                     const std::vector<Prompt>& prompts,
                                                     const PatternThresholds& th = {},
                                                     int threads = 1) {
  if (prompts.empty()) throw InputError("classify_model: need at least one prompt");
  auto traces = parallel_map(prompts.size(), threads, [&](std::size_t i) {
    return forward(ck, prompts[i], InstrumentationSpec::attention()).trace.attention;
  });
  std::map<HeadId, PatternLabel> out;
  for (std::size_t l = 0; l < ck.config.n_layers; ++l) {
    for (std::size_t h = 0; h < ck.config.n_heads; ++h) {
      std::vector<Tensor> maps;
      for (const auto& tr : traces) maps.push_back(tr.at({l, h}));
      out.emplace(HeadId{l, h}, classify_pattern(maps, th));
    }
  }
  return out;
}

}  // namespace bossink
