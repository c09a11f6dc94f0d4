#include "patchscope/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "patchscope/datasets.hpp"
#include "patchscope/imageio.hpp"
#include "patchscope/ops.hpp"

namespace patchscope {

double image_score(const PatchScoreMap& map, Pooling pooling) {
  if (map.logits.empty()) throw DataError("image_score on empty score map");
  if (pooling == Pooling::average) {
    double acc = 0.0;
    for (const double v : map.logits) acc += v;
    return acc / static_cast<double>(map.logits.size());
  }
  return *std::max_element(map.logits.begin(), map.logits.end());
}

double fake_probability(double logit) { return stable_sigmoid(logit); }

namespace {

std::string swap_ext(const std::string& path, const std::string& ext) {
  const auto dot = path.find_last_of('.');
  const auto slash = path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
    return path + ext;
  }
  return path.substr(0, dot) + ext;
}

}  // namespace

bool export_heatmap(const PatchScoreMap& map, const std::string& pgm_path) {
  if (map.logits.empty()) throw DataError("export_heatmap on empty score map");
  const auto [mn_it, mx_it] =
      std::minmax_element(map.logits.begin(), map.logits.end());
  const double mn = *mn_it, mx = *mx_it;
  const bool degenerate = mn == mx;
  std::vector<std::uint8_t> gray(map.logits.size());
  if (degenerate) {
    std::fill(gray.begin(), gray.end(), static_cast<std::uint8_t>(128));
  } else {
    for (std::size_t i = 0; i < gray.size(); ++i) {
      const double v = (map.logits[i] - mn) / (mx - mn) * 255.0;
      gray[i] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  const std::string out_pgm =
      pgm_path.ends_with(".pgm") ? pgm_path : pgm_path + ".pgm";
  write_pgm(out_pgm, static_cast<int>(map.w), static_cast<int>(map.h), gray);
  // Exact logits ride along in a CSV sidecar; the PGM is only a rendering.
  std::ofstream csv(swap_ext(out_pgm, ".csv"), std::ios::binary);
  if (!csv) throw IoError("cannot write heatmap csv for " + out_pgm);
  csv << "row,col,logit\n";
  char line[96];
  for (std::int64_t i = 0; i < map.h; ++i) {
    for (std::int64_t j = 0; j < map.w; ++j) {
      std::snprintf(line, sizeof(line), "%lld,%lld,%.12g\n",
                    static_cast<long long>(i), static_cast<long long>(j),
                    map.at(i, j));
      csv << line;
    }
  }
  if (!csv) throw IoError("short write: heatmap csv for " + out_pgm);
  return degenerate;
}

void write_score_csv(const std::string& path,
                     const std::vector<ScoreRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write score file: " + path);
  out << "image_path,logit,probability,label\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.path << ',';
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g,", r.logit, r.prob);
    out << buf;
    if (r.label >= 0) out << (r.label == 1 ? "fake" : "real");
    out << '\n';
  }
  if (!out) throw IoError("short write: " + path);
}

std::vector<ScoreRow> read_score_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open score file: " + path);
  std::vector<ScoreRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("image_path,", 0) == 0) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() < 3) {
      throw DataError("bad score file line " + std::to_string(lineno) +
                      " in " + path);
    }
    ScoreRow r;
    r.path = fields[0];
    try {
      r.logit = std::stod(fields[1]);
      r.prob = std::stod(fields[2]);
    } catch (const std::exception&) {
      throw DataError("bad numeric field in score file line " +
                      std::to_string(lineno) + " in " + path);
    }
    if (fields.size() >= 4 && !fields[3].empty()) {
      r.label = label_from_string(fields[3]) == Label::fake ? 1 : 0;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace patchscope
