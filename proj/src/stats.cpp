#include "desire/stats.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>

#include "desire/io.hpp"
#include "desire/numerics/linalg.hpp"

namespace desire {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void require_symmetric(const Matrix& s, const char* what) {
  if (s.rows() != s.cols()) throw DimensionError(std::string(what) + ": matrix is " + shape_string(s));
  const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ConsistencyError(std::string(what) + ": matrix is not symmetric");
  }
}

// Whitened residuals L^-1 (z - mu)^T, one column per row of z.
Matrix whiten(const Matrix& z, const ClassStats& s) {
  Matrix diff = (z.rowwise() - s.mu.transpose()).transpose();
  s.lower.triangularView<Eigen::Lower>().solveInPlace(diff);
  return diff;
}

Matrix log_density_rows(const Matrix& z, const StatsStore& store, std::vector<Matrix>* whitened) {
  if (store.empty()) throw ConsistencyError("surrogate_logits: empty statistics store");
  if (z.cols() != store.dim()) {
    throw DimensionError("surrogate_logits: features " + shape_string(z) + " vs stats dim " +
                         std::to_string(store.dim()));
  }
  const double d = static_cast<double>(z.cols());
  Matrix out(z.rows(), static_cast<Index>(store.size()));
  Index c = 0;
  for (const auto& [id, s] : store) {
    Matrix w = whiten(z, s);
    out.col(c++) = -0.5 * (w.colwise().squaredNorm().transpose().array() + d * kLog2Pi + s.log_det).matrix();
    if (whitened) whitened->push_back(std::move(w));
  }
  return out;
}

}  // namespace

ShrunkCovariance shrink_covariance(const Matrix& sigma) {
  require_symmetric(sigma, "shrink_covariance");
  require_finite(sigma, "shrink_covariance");
  const Index d = sigma.rows();
  const double trace = sigma.trace();
  const double base = trace > 0.0 ? trace / static_cast<double>(d) : 1.0;
  for (int k = 0; k < 6; ++k) {
    const double eps = std::pow(10.0, k - 6) * base;
    Matrix conditioned = sigma + eps * Matrix::Identity(d, d);
    Eigen::LLT<Matrix> llt(conditioned);
    if (llt.info() != Eigen::Success) continue;
    Matrix lower = llt.matrixL();
    if (!lower.allFinite() || (lower.diagonal().array() <= 0.0).any()) continue;
    return {std::move(conditioned), std::move(lower), eps};
  }
  throw ConditioningError("shrink_covariance: no shrinkage up to 1e-1 * trace/d makes the covariance SPD");
}

ClassStats compute_class_stats(const Matrix& features, int class_id) {
  if (features.rows() < 2) {
    throw InsufficientSamplesError("class " + std::to_string(class_id) + ": " + std::to_string(features.rows()) +
                                   " sample(s), need at least 2");
  }
  require_finite(features, "class statistics");
  const Vector mu = features.colwise().mean().transpose();
  const Matrix centered = features.rowwise() - mu.transpose();
  Matrix sigma = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  ShrunkCovariance shrunk = shrink_covariance(sigma);
  ClassStats s;
  s.class_id = class_id;
  s.mu = mu;
  s.sigma = std::move(sigma);
  s.count = static_cast<int>(features.rows());
  s.shrinkage_eps = shrunk.eps;
  s.log_det = log_det_from_cholesky(shrunk.lower);
  s.lower = std::move(shrunk.lower);
  return s;
}

ClassStats restore_class_stats(int class_id, int count, double eps, Vector mu, Matrix sigma) {
  if (sigma.rows() != mu.size() || sigma.cols() != mu.size()) throw DimensionError("class stats: shape mismatch");
  require_symmetric(sigma, "class stats");
  ClassStats s;
  s.class_id = class_id;
  s.count = count;
  s.shrinkage_eps = eps;
  s.mu = std::move(mu);
  s.sigma = std::move(sigma);
  try {
    s.lower = cholesky(s.conditioned());
  } catch (const DecompositionError&) {
    throw ConditioningError("class " + std::to_string(class_id) + ": stored shrinkage does not condition sigma");
  }
  s.log_det = log_det_from_cholesky(s.lower);
  return s;
}

double gaussian_log_density(const Vector& z, const ClassStats& stats) {
  if (z.size() != stats.dim()) throw DimensionError("gaussian_log_density: dimension mismatch");
  require_finite(z, "gaussian_log_density");
  Vector w = z - stats.mu;
  stats.lower.triangularView<Eigen::Lower>().solveInPlace(w);
  return -0.5 * (w.squaredNorm() + static_cast<double>(z.size()) * kLog2Pi + stats.log_det);
}

void StatsStore::add(ClassStats stats) {
  if (stats_.contains(stats.class_id)) {
    throw ConsistencyError("stats store: class " + std::to_string(stats.class_id) + " already recorded");
  }
  if (!stats_.empty() && stats.dim() != dim()) throw DimensionError("stats store: feature dimension differs");
  const int id = stats.class_id;
  stats_.emplace(id, std::move(stats));
}

const ClassStats& StatsStore::at(int class_id) const {
  const auto it = stats_.find(class_id);
  if (it == stats_.end()) throw ConsistencyError("stats store: no statistics for class " + std::to_string(class_id));
  return it->second;
}

std::vector<int> StatsStore::class_ids() const {
  std::vector<int> ids;
  for (const auto& [id, s] : stats_) ids.push_back(id);
  return ids;
}

Matrix surrogate_logits(const Matrix& z, const StatsStore& store) { return log_density_rows(z, store, nullptr); }

Var surrogate_logits(Var z, const StatsStore& store) {
  std::vector<Matrix> whitened;
  Matrix value = log_density_rows(z.value(), store, &whitened);
  std::vector<const ClassStats*> classes;
  for (const auto& [id, s] : store) classes.push_back(&s);
  return z.tape()->record(std::move(value), {z},
                          [z, classes = std::move(classes), whitened = std::move(whitened)](Tape& t, const Matrix& g) {
                            // d sigma_c / dz = -Sigma_c^-1 (z - mu_c) = -(L^-T w)^T
                            Matrix dz = Matrix::Zero(z.rows(), z.cols());
                            for (std::size_t c = 0; c < classes.size(); ++c) {
                              Matrix y = whitened[c];
                              classes[c]->lower.transpose().triangularView<Eigen::Upper>().solveInPlace(y);
                              dz.noalias() -= g.col(static_cast<Index>(c)).asDiagonal() * y.transpose();
                            }
                            t.accumulate(z, dz);
                          });
}

std::vector<unsigned char> encode_stats(const StatsStore& store) {
  io::BinaryWriter w;
  w.magic("DSRS");
  w.u32(static_cast<std::uint32_t>(store.size()));
  w.u32(static_cast<std::uint32_t>(store.dim()));
  for (const auto& [id, s] : store) {
    w.u32(static_cast<std::uint32_t>(id));
    w.u32(static_cast<std::uint32_t>(s.count));
    w.f64(s.shrinkage_eps);
    w.matrix(s.mu.transpose());
    w.matrix(s.sigma);
  }
  return w.bytes();
}

StatsStore decode_stats(std::vector<unsigned char> bytes) {
  io::BinaryReader r(std::move(bytes));
  r.expect_magic("DSRS");
  const std::uint32_t count = r.u32();
  const auto d = static_cast<Index>(r.u32());
  StatsStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto id = static_cast<int>(r.u32());
    const auto n = static_cast<int>(r.u32());
    const double eps = r.f64();
    Vector mu = r.matrix(1, d).transpose();
    Matrix sigma = r.matrix(d, d);
    store.add(restore_class_stats(id, n, eps, std::move(mu), std::move(sigma)));
  }
  r.expect_end();
  return store;
}

void save_stats(const std::filesystem::path& path, const StatsStore& store) {
  io::write_file_atomic(path, encode_stats(store));
}

StatsStore load_stats(const std::filesystem::path& path) { return decode_stats(io::read_file(path)); }

}  // namespace desire
