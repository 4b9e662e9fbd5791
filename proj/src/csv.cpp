#include "mrtint/csv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "mrtint/errors.hpp"

namespace mrtint {
namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
  }
  return out;
}

double parse_double(const std::string& cell, const std::string& origin, int row,
                    const std::string& column) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw ValidationError(origin + ": row " + std::to_string(row) + ", column '" +
                  column + "': cannot parse '" + cell + "' as a number");
  return value;
}

int parse_int(const std::string& cell, const std::string& origin, int row,
              const std::string& column) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw ValidationError(origin + ": row " + std::to_string(row) + ", column '" +
                  column + "': cannot parse '" + cell + "' as an integer");
  return value;
}

}  // namespace

CombinedDataset read_dataset_csv(std::istream& in, const std::string& origin) {
  std::string line;
  if (!std::getline(in, line))
    throw ValidationError(origin + ": empty input, header row required");
  const auto header = split_line(line);

  int col_id = -1, col_study = -1, col_t = -1, col_a = -1, col_y = -1;
  std::vector<int> col_x;      // ordered x1..xK
  std::vector<int> col_ph;     // prob_h or prob_h1..prob_hJ
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    const std::string& h = header[i];
    if (h == "participant_id") col_id = i;
    else if (h == "study") col_study = i;
    else if (h == "t") col_t = i;
    else if (h == "a") col_a = i;
    else if (h == "y") col_y = i;
    else if (h == "prob_h") col_ph.assign(1, i);
    else if (h.rfind("prob_h", 0) == 0) col_ph.push_back(i);
    else if (h.size() >= 2 && h[0] == 'x') col_x.push_back(i);
    else
      throw ValidationError(origin + ": unknown header column '" + h + "'");
  }
  for (auto [col, name] : {std::pair{col_id, "participant_id"},
                           {col_study, "study"}, {col_t, "t"},
                           {col_a, "a"}, {col_y, "y"}}) {
    if (col < 0) throw ValidationError(origin + ": missing required column '" +
                               std::string(name) + "'");
  }
  if (col_x.empty()) throw ValidationError(origin + ": no covariate columns x1..xK");

  std::vector<Trajectory> trajectories;
  std::unordered_set<std::string> seen_ids;
  int max_level = 1;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw ValidationError(origin + ": row " + std::to_string(row) + ": expected " +
                    std::to_string(header.size()) + " cells, found " +
                    std::to_string(cells.size()));
    const std::string& pid = cells[col_id];
    if (trajectories.empty() || trajectories.back().participant_id != pid) {
      if (!seen_ids.insert(pid).second)
        throw ValidationError(origin + ": row " + std::to_string(row) +
                      ": rows for participant '" + pid +
                      "' are not contiguous");
      Trajectory traj;
      traj.participant_id = pid;
      traj.study_indicator = parse_int(cells[col_study], origin, row, "study");
      if (traj.study_indicator != 0 && traj.study_indicator != 1)
        throw ValidationError(origin + ": row " + std::to_string(row) +
                      ": study must be 0 or 1");
      trajectories.push_back(std::move(traj));
    }
    TimePoint pt;
    pt.t = parse_int(cells[col_t], origin, row, "t");
    pt.covariates.reserve(col_x.size());
    for (std::size_t k = 0; k < col_x.size(); ++k)
      pt.covariates.push_back(
          parse_double(cells[col_x[k]], origin, row, header[col_x[k]]));
    pt.treatment = parse_int(cells[col_a], origin, row, "a");
    max_level = std::max(max_level, pt.treatment);
    pt.outcome = parse_double(cells[col_y], origin, row, "y");
    for (int c : col_ph) {
      const std::string& cell = cells[c];
      if (!cell.empty())
        pt.prob_h.push_back(parse_double(cell, origin, row, header[c]));
    }
    if (!pt.prob_h.empty() && static_cast<int>(pt.prob_h.size()) != static_cast<int>(col_ph.size()))
      throw ValidationError(origin + ": row " + std::to_string(row) +
                    ": prob_h columns must be all present or all empty");
    trajectories.back().points.push_back(std::move(pt));
  }
  return make_dataset(std::move(trajectories), max_level);
}

CombinedDataset read_dataset_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return read_dataset_csv(in, path);
}

void write_dataset_csv(std::ostream& out, const CombinedDataset& dataset) {
  const int k = dataset.covariate_dim;
  bool any_ph = false;
  for (const auto& tr : dataset.trajectories)
    for (const auto& pt : tr.points) any_ph |= !pt.prob_h.empty();

  out << "participant_id,study,t";
  for (int i = 1; i <= k; ++i) out << ",x" << i;
  out << ",a,y";
  if (any_ph) {
    if (dataset.level_count <= 1) out << ",prob_h";
    else
      for (int j = 1; j <= dataset.level_count; ++j) out << ",prob_h" << j;
  }
  out << '\n';

  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (const auto& tr : dataset.trajectories) {
    for (const auto& pt : tr.points) {
      out << tr.participant_id << ',' << tr.study_indicator << ',' << pt.t;
      for (double x : pt.covariates) { out << ','; num(x); }
      out << ',' << pt.treatment << ',';
      num(pt.outcome);
      if (any_ph) {
        const int cols = dataset.level_count <= 1 ? 1 : dataset.level_count;
        for (int j = 0; j < cols; ++j) {
          out << ',';
          if (j < static_cast<int>(pt.prob_h.size())) num(pt.prob_h[j]);
        }
      }
      out << '\n';
    }
  }
}

void write_dataset_csv_file(const std::string& path, const CombinedDataset& dataset) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_dataset_csv(out, dataset);
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace mrtint
