#include "muffin_cli/plot.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace muffin::cli {

namespace {

constexpr double kWidth = 640.0, kHeight = 480.0, kMargin = 56.0;

// Fixed-precision formatting keeps the output bytes independent of locale and libc printing quirks.
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v == 0.0 ? 0.0 : v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const std::vector<std::string>& palette() {
  static const std::vector<std::string> p{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  return p;
}

std::string header(const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" viewBox=\"0 0 "
    << kWidth << ' ' << kHeight << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << num(kWidth / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << escape(title) << "</text>\n";
  return s.str();
}

std::string axes(const std::string& xlabel, const std::string& ylabel) {
  const double x0 = kMargin, y0 = kHeight - kMargin, x1 = kWidth - kMargin, y1 = kMargin;
  std::ostringstream s;
  s << "<g stroke=\"black\" stroke-width=\"1\">\n"
    << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1) << "\" y2=\"" << num(y0) << "\"/>\n"
    << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(y1) << "\"/>\n"
    << "</g>\n"
    << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(kHeight - 16) << "\" text-anchor=\"middle\" "
    << "font-family=\"sans-serif\" font-size=\"13\">" << escape(xlabel) << "</text>\n"
    << "<text x=\"18\" y=\"" << num((y0 + y1) / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
    << "font-size=\"13\" transform=\"rotate(-90 18 " << num((y0 + y1) / 2) << ")\">" << escape(ylabel) << "</text>\n";
  return s.str();
}

double sx(double u) { return kMargin + u * (kWidth - 2 * kMargin); }
double sy(double u) { return kHeight - kMargin - u * (kHeight - 2 * kMargin); }

// Red through yellow to green over the [0, 2] phoneme accuracy scale.
std::string accuracy_colour(double a) {
  const double t = std::clamp(a / 2.0, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 * std::min(1.0, 2.0 * (1.0 - t))));
  const int g = static_cast<int>(std::lround(200 * std::min(1.0, 2.0 * t)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, 40);
  return buf;
}

std::string marker(std::size_t shape, double x, double y, const std::string& fill) {
  const double r = 4.0;
  std::ostringstream s;
  switch (shape % 4) {
    case 0:
      s << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"" << num(r) << "\"";
      break;
    case 1:
      s << "<rect x=\"" << num(x - r) << "\" y=\"" << num(y - r) << "\" width=\"" << num(2 * r) << "\" height=\"" << num(2 * r) << "\"";
      break;
    case 2:
      s << "<polygon points=\"" << num(x) << ',' << num(y - r) << ' ' << num(x + r) << ',' << num(y + r) << ' ' << num(x - r) << ','
        << num(y + r) << "\"";
      break;
    default:
      s << "<polygon points=\"" << num(x) << ',' << num(y - r) << ' ' << num(x + r) << ',' << num(y) << ' ' << num(x) << ','
        << num(y + r) << ' ' << num(x - r) << ',' << num(y) << "\"";
  }
  s << " fill=\"" << fill << "\" stroke=\"black\" stroke-width=\"0.5\"/>\n";
  return s.str();
}

}  // namespace

std::string render_pr_curve(const std::vector<CurveSeries>& series) {
  if (series.empty()) throw PlotError("render_pr_curve: no curves given");
  for (const auto& c : series)
    if (c.points.size() < 2) throw PlotError("render_pr_curve: curve '" + c.label + "' needs at least 2 points");
  std::ostringstream s;
  s << header("Precision-recall") << axes("recall", "precision");
  for (int k = 0; k <= 10; k += 2) {
    const double u = k / 10.0;
    s << "<text x=\"" << num(sx(u)) << "\" y=\"" << num(kHeight - kMargin + 16) << "\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"10\">" << num(u) << "</text>\n"
      << "<text x=\"" << num(kMargin - 6) << "\" y=\"" << num(sy(u) + 3) << "\" text-anchor=\"end\" "
      << "font-family=\"sans-serif\" font-size=\"10\">" << num(u) << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::string& colour = palette()[i % palette().size()];
    s << "<polyline class=\"pr\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < series[i].points.size(); ++k) {
      const auto& p = series[i].points[k];
      s << (k ? " " : "") << num(sx(p.recall)) << ',' << num(sy(p.precision.value_or(1.0)));
    }
    s << "\"/>\n";
    const double ly = kMargin + 16.0 * static_cast<double>(i);
    s << "<line x1=\"" << num(kWidth - kMargin - 150) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(kWidth - kMargin - 130)
      << "\" y2=\"" << num(ly) << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << num(kWidth - kMargin - 124) << "\" y=\"" << num(ly + 4) << "\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << escape(series[i].label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) throw PlotError("pca_2d: need at least 2 points");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows[0].size());
  if (d < 1) throw PlotError("pca_2d: empty rows");
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != d) throw PlotError("pca_2d: rows differ in length");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rows[i][j];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigen sorts eigenvalues ascending; take the top two (or pad with zero when d = 1).
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(d, 2);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(c) = v;
  }
  const Eigen::MatrixXd proj = x * basis;
  std::vector<std::array<double, 2>> out(rows.size());
  for (Eigen::Index i = 0; i < n; ++i) out[i] = {proj(i, 0), proj(i, 1)};
  return out;
}

EmbeddingTable parse_embeddings_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw PlotError("embeddings CSV is empty");
  std::vector<std::string> head;
  {
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) head.push_back(cell);
  }
  const auto col = [&](const std::string& name) {
    const auto it = std::find(head.begin(), head.end(), name);
    if (it == head.end()) throw PlotError("embeddings CSV lacks a '" + name + "' column");
    return static_cast<std::size_t>(it - head.begin());
  };
  const std::size_t c_cat = col("symbol"), c_acc = col("accuracy"), c_first = col("e0");
  EmbeddingTable t;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != head.size()) throw PlotError("embeddings CSV line " + std::to_string(row) + ": wrong field count");
    try {
      t.category.push_back(f[c_cat]);
      t.accuracy.push_back(std::stod(f[c_acc]));
      std::vector<double> v;
      for (std::size_t j = c_first; j < f.size(); ++j) v.push_back(std::stod(f[j]));
      t.rows.push_back(std::move(v));
    } catch (const std::logic_error&) {
      throw PlotError("embeddings CSV line " + std::to_string(row) + ": not a number");
    }
  }
  return t;
}

std::string render_embeddings(const EmbeddingTable& table) {
  if (table.rows.size() != table.accuracy.size() || table.rows.size() != table.category.size())
    throw PlotError("render_embeddings: columns differ in length");
  const auto pts = pca_2d(table.rows);
  double lo[2] = {pts[0][0], pts[0][1]}, hi[2] = {pts[0][0], pts[0][1]};
  for (const auto& p : pts)
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  const auto unit = [&](double v, int a) { return hi[a] > lo[a] ? (v - lo[a]) / (hi[a] - lo[a]) : 0.5; };

  // Marker shapes follow the sorted category names.
  std::map<std::string, std::size_t> shape;
  for (const auto& c : table.category) shape.emplace(c, 0);
  std::size_t next = 0;
  for (auto& [name, s] : shape) s = next++;

  std::ostringstream s;
  s << header("Phoneme representations (PCA)") << axes("PC 1", "PC 2");
  for (std::size_t i = 0; i < pts.size(); ++i)
    s << marker(shape.at(table.category[i]), sx(unit(pts[i][0], 0)), sy(unit(pts[i][1], 1)), accuracy_colour(table.accuracy[i]));
  double ly = kMargin;
  for (const auto& [name, sh] : shape) {
    if (sh >= 12) break;  // legend stays readable for large inventories
    s << marker(sh, kWidth - kMargin - 60, ly, "#bbbbbb") << "<text x=\"" << num(kWidth - kMargin - 50) << "\" y=\""
      << num(ly + 4) << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(name) << "</text>\n";
    ly += 14.0;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace muffin::cli
