#include "patchscope/evaluator.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace patchscope {

double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw ConfigError("average_precision: size mismatch");
  }
  std::int64_t n_pos = 0, n_neg = 0;
  for (const int l : labels) {
    if (l == 1) {
      ++n_pos;
    } else if (l == 0) {
      ++n_neg;
    } else {
      throw DataError("average_precision: label outside {real=0, fake=1}");
    }
  }
  if (n_pos == 0 || n_neg == 0) {
    throw DataError(
        "average precision undefined: both classes must be present (got " +
        std::to_string(n_pos) + " fake, " + std::to_string(n_neg) + " real)");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];  // ties keep input order
  });
  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  for (const std::size_t i : order) {
    if (labels[i] == 1) {
      ++tp;
      const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
      const double precision =
          static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += (recall - prev_recall) * precision;
      prev_recall = recall;
    } else {
      ++fp;
    }
  }
  return ap;
}

double accuracy(const std::vector<double>& probs,
                const std::vector<int>& labels, double threshold) {
  if (probs.size() != labels.size()) {
    throw ConfigError("accuracy: size mismatch");
  }
  if (probs.empty()) return 0.0;
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int pred = probs[i] >= threshold ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

SetMetrics metrics_from_rows(const std::string& name,
                             const std::vector<ScoreRow>& rows, int skipped) {
  SetMetrics m;
  m.name = name;
  m.skipped = skipped;
  std::vector<double> scores, probs;
  std::vector<int> labels;
  for (const auto& r : rows) {
    if (r.label < 0) {
      throw DataError("metrics require labeled score rows (" + r.path +
                      " has no label)");
    }
    scores.push_back(r.logit);
    probs.push_back(r.prob);
    labels.push_back(r.label);
    if (r.label == 1) {
      ++m.n_fake;
    } else {
      ++m.n_real;
    }
  }
  m.acc = accuracy(probs, labels);
  m.ap = average_precision(scores, labels);
  return m;
}

void EvalReport::finalize() {
  if (sets.empty()) {
    mean_acc = 0.0;
    map = 0.0;
    return;
  }
  double acc_sum = 0.0, ap_sum = 0.0;
  for (const auto& s : sets) {
    acc_sum += s.acc;
    ap_sum += s.ap;
  }
  mean_acc = acc_sum / static_cast<double>(sets.size());
  map = ap_sum / static_cast<double>(sets.size());
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "# patchscope evaluation report\n";
  for (const auto& [k, v] : metadata) os << "# " << k << ": " << v << '\n';
  char line[256];
  for (const auto& s : sets) {
    std::snprintf(line, sizeof(line),
                  "set %s n_real=%d n_fake=%d acc=%.6f ap=%.6f skipped=%d\n",
                  s.name.c_str(), s.n_real, s.n_fake, s.acc, s.ap, s.skipped);
    os << line;
  }
  std::snprintf(line, sizeof(line), "aggregate mean_acc=%.6f map=%.6f\n",
                mean_acc, map);
  os << line;
  return os.str();
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "set,n_real,n_fake,acc,ap,skipped\n";
  char line[256];
  for (const auto& s : sets) {
    std::snprintf(line, sizeof(line), "%s,%d,%d,%.6f,%.6f,%d\n",
                  s.name.c_str(), s.n_real, s.n_fake, s.acc, s.ap, s.skipped);
    os << line;
  }
  std::snprintf(line, sizeof(line), "aggregate,,,%.6f,%.6f,\n", mean_acc, map);
  os << line;
  return os.str();
}

std::vector<ScoreRow> ensemble_scores(const std::vector<ScoreRow>& a,
                                      const std::vector<ScoreRow>& b,
                                      double alpha) {
  std::map<std::string, const ScoreRow*> bmap;
  for (const auto& r : b) bmap[r.path] = &r;
  std::vector<std::string> only_a, only_b;
  std::vector<ScoreRow> out;
  for (const auto& r : a) {
    auto it = bmap.find(r.path);
    if (it == bmap.end()) {
      only_a.push_back(r.path);
      continue;
    }
    ScoreRow c = r;
    c.logit = r.logit + alpha * it->second->logit;
    c.prob = fake_probability(c.logit);
    if (c.label < 0) c.label = it->second->label;
    out.push_back(std::move(c));
    bmap.erase(it);
  }
  for (const auto& [path, row] : bmap) only_b.push_back(path);
  if (!only_a.empty() || !only_b.empty()) {
    std::string msg = "ensemble image sets differ;";
    msg += " only in first file:";
    for (const auto& p : only_a) msg += ' ' + p;
    msg += "; only in second file:";
    for (const auto& p : only_b) msg += ' ' + p;
    throw DataError(msg);
  }
  return out;
}

double grid_search_alpha(const std::vector<ScoreRow>& val_a,
                         const std::vector<ScoreRow>& val_b,
                         const std::vector<double>& alphas) {
  if (alphas.empty()) throw ConfigError("alpha grid is empty");
  double best_alpha = alphas.front();
  double best_ap = -1.0;
  for (const double alpha : alphas) {
    const auto combined = ensemble_scores(val_a, val_b, alpha);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : combined) {
      if (r.label < 0) {
        throw DataError("alpha grid search requires labeled validation scores");
      }
      scores.push_back(r.logit);
      labels.push_back(r.label);
    }
    const double ap = average_precision(scores, labels);
    if (ap > best_ap) {
      best_ap = ap;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

std::string hardware_descriptor() {
  std::string model = "unknown-cpu";
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        model = line.substr(colon + 2);
      }
      break;
    }
  }
  return model + " / 1 worker";
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "input: %lldx%lld\n",
                static_cast<long long>(input_h),
                static_cast<long long>(input_w));
  os << line;
  std::snprintf(line, sizeof(line),
                "flops: %lld (MACs; 1 MAC = 1 FLOP)\nflops_2x: %lld "
                "(2 FLOPs per MAC)\nparams: %lld\n",
                static_cast<long long>(flops), static_cast<long long>(flops_2x),
                static_cast<long long>(params));
  os << line;
  if (repeats > 0) {
    std::snprintf(line, sizeof(line),
                  "latency_median_ms: %.3f\nlatency_p95_ms: %.3f\nrepeats: "
                  "%d\nhardware: %s\n",
                  median_ms, p95_ms, repeats, hardware.c_str());
    os << line;
  }
  return os.str();
}

}  // namespace patchscope
