#include "clinfuse/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "clinfuse/error.hpp"

namespace clinfuse {

ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> labels, int positive_class) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  }
  if (positive_class != 0 && positive_class != 1) throw std::invalid_argument("confusion: positive class must be 0 or 1");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i], l = labels[i];
    if ((p != 0 && p != 1) || (l != 0 && l != 1)) throw std::invalid_argument("confusion: classes must be binary");
    const bool pred_pos = p == positive_class, true_pos = l == positive_class;
    if (pred_pos && true_pos) {
      ++c.tp;
    } else if (pred_pos) {
      ++c.fp;
    } else if (true_pos) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

namespace {

std::optional<double> ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport metrics(const ConfusionCounts& c) {
  return {ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.tp + c.fn), ratio(c.tn, c.tn + c.fp), ratio(c.tp, c.tp + c.fp),
          ratio(c.tn, c.tn + c.fn)};
}

std::string_view aggregation_name(Aggregation a) { return a == Aggregation::Slice ? "slice" : "patient"; }

Aggregation parse_aggregation(std::string_view name) {
  if (name == "slice") return Aggregation::Slice;
  if (name == "patient") return Aggregation::PatientMajority;
  throw ConfigError("unknown aggregation '" + std::string(name) + "' (expected slice or patient)");
}

int majority_vote(std::span<const int> slice_predictions, int positive_class) {
  if (slice_predictions.empty()) throw std::invalid_argument("majority_vote: no slices");
  const auto pos = std::count(slice_predictions.begin(), slice_predictions.end(), positive_class);
  const auto neg = static_cast<std::ptrdiff_t>(slice_predictions.size()) - pos;
  return pos >= neg ? positive_class : 1 - positive_class;
}

EvaluationResult evaluate_model(const ModelConfig& cfg, ModelParams& params, const Dataset& fold,
                                Aggregation aggregation) {
  if (fold.patients.empty()) throw std::invalid_argument("evaluate_model: empty fold");
  NoGradGuard no_grad;
  const auto refs = slice_index(fold);
  std::vector<int> slice_preds;
  slice_preds.reserve(refs.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < refs.size(); start += kChunk) {
    const std::size_t end = std::min(refs.size(), start + kChunk);
    const Batch batch = make_batch(fold, std::span<const SliceRef>(refs).subspan(start, end - start));
    const auto preds = predict_classes(model_forward(cfg, params, batch.images, batch.clinical, NormMode::Eval));
    slice_preds.insert(slice_preds.end(), preds.begin(), preds.end());
  }

  EvaluationResult out;
  if (aggregation == Aggregation::Slice) {
    out.predictions = std::move(slice_preds);
    for (const auto& r : refs) out.labels.push_back(fold.patients[r.patient].label);
  } else {
    std::size_t k = 0;
    for (const auto& p : fold.patients) {
      const std::span<const int> votes(slice_preds.data() + k, p.images.size());
      out.predictions.push_back(majority_vote(votes));
      out.labels.push_back(p.label);
      k += p.images.size();
    }
  }
  out.counts = confusion(out.predictions, out.labels);
  out.report = metrics(out.counts);
  return out;
}

std::uint64_t fold_seed(std::uint64_t seed, int fold) { return derive_seed(seed, "fold-" + std::to_string(fold)); }

namespace {

FoldResult run_fold(const Dataset& raw, const FoldAssignment& folds, int i, const ModelConfig& model,
                    const TrainConfig& train_cfg, Aggregation aggregation) {
  FoldResult r;
  r.fold = i;
  r.held_out = folds.folds.at(static_cast<std::size_t>(i));
  const auto train_ids = folds.training_ids(i);
  const Dataset train_raw = subset(raw, train_ids);
  const Dataset test_raw = subset(raw, r.held_out);
  r.stats = compute_stats(train_raw);
  const Dataset train_set = preprocess(train_raw, r.stats, model.image_size);
  const Dataset test_set = preprocess(test_raw, r.stats, model.image_size);

  TrainConfig cfg = train_cfg;
  cfg.seed = fold_seed(train_cfg.seed, i);
  ModelConfig mcfg = model;
  mcfg.clinical_dim = raw.clinical_dim;
  TrainingState state = make_training_state(mcfg, cfg);
  train(state, train_set, cfg);
  r.log = state.log;
  r.evaluation = evaluate_model(mcfg, state.params, test_set, aggregation);
  return r;
}

std::array<MetricSummary, 5> summarize(const std::vector<FoldResult>& folds) {
  std::array<MetricSummary, 5> out;
  for (std::size_t m = 0; m < out.size(); ++m) {
    std::vector<double> xs;
    for (const auto& f : folds) {
      if (const auto v = f.evaluation.report.values()[m]) xs.push_back(*v);
    }
    if (xs.empty()) continue;
    double mean = 0.0;
    for (const double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (const double x : xs) ss += (x - mean) * (x - mean);
    out[m].mean = mean;
    out[m].stddev = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  }
  return out;
}

}  // namespace

CrossValidationResult cross_validate(const Dataset& raw, const FoldAssignment& folds, const ModelConfig& model,
                                     const TrainConfig& train, const CvOptions& options) {
  if (folds.k() < 2) throw std::invalid_argument("cross_validate: need at least 2 folds");
  for (const auto& p : raw.patients) (void)folds.fold_of(p.patient_id);
  std::size_t assigned = 0;
  for (const auto& f : folds.folds) assigned += f.size();
  if (assigned != raw.patients.size()) throw std::invalid_argument("cross_validate: folds do not match the dataset");

  const int k = folds.k();
  std::vector<FoldResult> results(static_cast<std::size_t>(k));
  const int jobs = std::clamp(options.jobs, 1, k);
  if (jobs == 1) {
    for (int i = 0; i < k; ++i) results[static_cast<std::size_t>(i)] = run_fold(raw, folds, i, model, train, options.aggregation);
  } else {
    std::mutex mu;
    int next = 0;
    std::exception_ptr error;
    auto worker = [&] {
      for (;;) {
        int i = 0;
        {
          std::lock_guard lock(mu);
          if (next >= k || error) return;
          i = next++;
        }
        try {
          results[static_cast<std::size_t>(i)] = run_fold(raw, folds, i, model, train, options.aggregation);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }
  CrossValidationResult out;
  out.summary = summarize(results);
  out.folds = std::move(results);
  return out;
}

std::vector<AblationRow> ablation_run(const Dataset& raw, const FoldAssignment& folds, const ModelConfig& model,
                                      const TrainConfig& train, const CvOptions& options) {
  std::vector<AblationRow> rows;
  for (const ModelVariant v : kAblationVariants) {
    ModelConfig m = model;
    m.variant = v;
    rows.push_back({v, cross_validate(raw, folds, m, train, options)});
  }
  return rows;
}

std::string format_percent(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

std::string format_fraction(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

std::string render_table(const std::vector<std::pair<std::string, std::array<std::optional<double>, 5>>>& rows) {
  std::size_t label_width = 7;
  for (const auto& r : rows) label_width = std::max(label_width, r.first.size());
  const char* heads[5] = {"ACC", "SEN", "SPE", "PPV", "NPV"};
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(label_width), "variant");
  out << buf;
  for (const char* h : heads) {
    std::snprintf(buf, sizeof buf, "  %7s", h);
    out << buf;
  }
  out << '\n';
  for (const auto& [label, values] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(label_width), label.c_str());
    out << buf;
    for (const auto& v : values) {
      std::snprintf(buf, sizeof buf, "  %7s", format_percent(v).c_str());
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::string render_summary_table(const std::vector<AblationRow>& rows) {
  std::vector<std::pair<std::string, std::array<std::optional<double>, 5>>> table;
  for (const auto& r : rows) {
    std::array<std::optional<double>, 5> means;
    for (std::size_t m = 0; m < 5; ++m) means[m] = r.cv.summary[m].mean;
    table.emplace_back(std::string(variant_name(r.variant)), means);
  }
  return render_table(table);
}

std::string render_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant,fold,acc,sens,spec,ppv,npv\n";
  for (const auto& r : rows) {
    for (const auto& f : r.cv.folds) {
      out << variant_name(r.variant) << ',' << f.fold;
      for (const auto& v : f.evaluation.report.values()) out << ',' << format_fraction(v);
      out << '\n';
    }
    out << variant_name(r.variant) << ",mean";
    for (const auto& s : r.cv.summary) out << ',' << format_fraction(s.mean);
    out << '\n';
  }
  return out.str();
}

}  // namespace clinfuse
