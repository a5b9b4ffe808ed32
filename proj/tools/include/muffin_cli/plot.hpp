#pragma once

// Deterministic SVG figures: overlaid precision-recall curves and a 2-D
// principal-component scatter of phoneme representations.

#include <array>
#include <string>
#include <vector>

#include "muffin/evaluation.hpp"

namespace muffin::cli {

class PlotError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CurveSeries {
  std::string label;
  std::vector<eval::PrPoint> points;
};

/// One polyline per series with a vertex per curve point. A point with no
/// flagged segments has no precision and is drawn at precision 1.
std::string render_pr_curve(const std::vector<CurveSeries>& series);

/// Rows projected onto their top two principal components (centered). Each
/// axis is signed so its largest-magnitude loading is positive.
std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& rows);

struct EmbeddingTable {
  std::vector<std::vector<double>> rows;
  std::vector<double> accuracy;      // colour
  std::vector<std::string> category; // marker shape
};

EmbeddingTable parse_embeddings_csv(const std::string& text);
std::string render_embeddings(const EmbeddingTable& table);

}  // namespace muffin::cli
