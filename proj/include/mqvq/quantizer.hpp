#pragma once

// Codebook, nearest-neighbour vector quantization with a straight-through
// estimator, the two-term codebook/commitment loss, and codebook
// diagnostics (usage percentage, PCA projection).

#include <Eigen/Dense>
#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvq/nn.hpp"

namespace mqvq {

template <typename T>
struct Codebook {
  BasicTensor<T> embeddings;      // [K x n_z]
  BasicTensor<T> mask_embedding;  // [n_z]

  Codebook() = default;

  // Rows and the mask code are uniform on [-1/K, 1/K].
  Codebook(std::size_t codes, std::size_t dim, Rng& rng) {
    if (codes == 0 || dim == 0) throw std::invalid_argument("codebook: K and n_z must be >= 1");
    const double bound = 1.0 / double(codes);
    embeddings = uniform_parameter<T>({codes, dim}, bound, rng);
    mask_embedding = uniform_parameter<T>({dim}, bound, rng);
  }

  std::size_t size() const { return embeddings.defined() ? embeddings.dim(0) : 0; }
  std::size_t dim() const { return embeddings.dim(1); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".embeddings", embeddings});
    out.push_back({prefix + ".mask_embedding", mask_embedding});
  }
};

template <typename T>
struct QuantizationResult {
  std::vector<int> codes;
  BasicTensor<T> quantized;      // embedding values, gradient straight to features
  BasicTensor<T> codebook_rows;  // gathered embeddings, gradient to the codebook
  double commit_distance = 0.0;  // mean squared feature-to-code distance
};

// argmin_k ||z - e_k||^2 per row, distances accumulated in double; ties
// resolve to the smallest k.
template <typename T>
std::vector<int> nearest_codes(const BasicTensor<T>& features, const BasicTensor<T>& embeddings) {
  detail::require_rank("quantize", features, 2);
  const std::size_t rows = features.dim(0), dim = features.dim(1), codes = embeddings.dim(0);
  if (codes == 0) throw std::invalid_argument("quantize: empty codebook");
  detail::require(embeddings.dim(1) == dim, "quantize: feature width " + std::to_string(dim) +
                                                " does not match code width " +
                                                std::to_string(embeddings.dim(1)));
  const auto z = features.values();
  const auto e = embeddings.values();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double best = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (std::size_t k = 0; k < codes; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = double(z[r * dim + j]) - double(e[k * dim + j]);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_k = static_cast<int>(k);
      }
    }
    out[r] = best_k;
  }
  return out;
}

template <typename T>
QuantizationResult<T> quantize(const BasicTensor<T>& features, const Codebook<T>& codebook) {
  if (!codebook.embeddings.defined() || codebook.size() == 0)
    throw std::invalid_argument("quantize: empty codebook");
  QuantizationResult<T> out;
  out.codes = nearest_codes(features, codebook.embeddings);
  out.codebook_rows = index_rows(codebook.embeddings, out.codes);
  out.quantized = straight_through(features, out.codebook_rows.detach());
  double acc = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double d = double(features[i]) - double(out.codebook_rows[i]);
    acc += d * d;
  }
  out.commit_distance = features.size() ? acc / double(features.size()) : 0.0;
  return out;
}

// mean||sg(z) - e||^2 + beta * mean||z - sg(e)||^2
template <typename T>
BasicTensor<T> vq_loss(const BasicTensor<T>& features, const QuantizationResult<T>& result,
                       T beta) {
  auto codebook_term = mse_loss(features.detach(), result.codebook_rows);
  if (beta == T(0)) return codebook_term;
  auto commit_term = mse_loss(features, result.codebook_rows.detach());
  return add(codebook_term, scale(commit_term, beta));
}

// 100 * |distinct codes| / K.
inline double codebook_usage(std::span<const std::vector<int>> code_lists, std::size_t codes) {
  if (codes == 0) throw std::invalid_argument("codebook_usage: K must be >= 1");
  std::vector<bool> seen(codes, false);
  std::size_t distinct = 0;
  for (const auto& list : code_lists)
    for (int c : list) {
      if (c < 0 || static_cast<std::size_t>(c) >= codes)
        throw std::out_of_range("codebook_usage: code " + std::to_string(c) +
                                " outside [0, " + std::to_string(codes) + ")");
      if (!seen[c]) {
        seen[c] = true;
        ++distinct;
      }
    }
  return 100.0 * double(distinct) / double(codes);
}

// Running union of observed codes.
class UsageTracker {
 public:
  explicit UsageTracker(std::size_t codes) : seen_(codes, false) {}

  void observe(std::span<const int> list) {
    for (int c : list) {
      if (c < 0 || static_cast<std::size_t>(c) >= seen_.size())
        throw std::out_of_range("usage: code " + std::to_string(c) + " out of range");
      if (!seen_[c]) {
        seen_[c] = true;
        ++distinct_;
      }
    }
  }

  double percentage() const { return 100.0 * double(distinct_) / double(seen_.size()); }
  std::size_t distinct() const { return distinct_; }

 private:
  std::vector<bool> seen_;
  std::size_t distinct_ = 0;
};

// Projection of mean-centred embeddings onto the top `dims` principal axes
// of their covariance. Null directions of a degenerate covariance project
// to zero.
template <typename T>
BasicTensor<T> codebook_pca(const Codebook<T>& codebook, std::size_t dims = 2) {
  const std::size_t k = codebook.size(), d = codebook.dim();
  if (k < 2) throw std::invalid_argument("codebook_pca: need at least 2 codes");
  Eigen::MatrixXd x(k, d);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = double(codebook.embeddings[i * d + j]);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / double(k - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  // Eigenvalues ascend; take from the back.
  const double top = std::max(solver.eigenvalues().cwiseAbs().maxCoeff(), 0.0);
  std::vector<T> out(k * dims, T(0));
  for (std::size_t c = 0; c < dims && c < d; ++c) {
    const Eigen::Index idx = Eigen::Index(d - 1 - c);
    if (solver.eigenvalues()(idx) <= top * 1e-12) continue;
    Eigen::VectorXd axis = solver.eigenvectors().col(idx);
    // Sign convention: largest-magnitude component positive.
    Eigen::Index arg;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    const Eigen::VectorXd proj = x * axis;
    for (std::size_t i = 0; i < k; ++i) out[i * dims + c] = static_cast<T>(proj(Eigen::Index(i)));
  }
  return BasicTensor<T>({k, dims}, std::move(out));
}

template <typename T>
void write_pca_csv(const std::string& path, const BasicTensor<T>& projection) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "code_index,pc1,pc2\n";
  const std::size_t dims = projection.dim(1);
  for (std::size_t i = 0; i < projection.dim(0); ++i) {
    os << i << ',' << double(projection[i * dims]) << ','
       << (dims > 1 ? double(projection[i * dims + 1]) : 0.0) << '\n';
  }
}

}  // namespace mqvq
