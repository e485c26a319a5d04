#include "desire/lora.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "desire/io.hpp"
#include "desire/numerics/rng.hpp"

namespace desire {

std::string to_string(Projection p) { return p == Projection::Q ? "Q" : "V"; }
std::string to_string(FactorMatrix m) { return m == FactorMatrix::A ? "A" : "B"; }
std::string to_string(SetRole r) { return r == SetRole::Previous ? "previous" : "current"; }

void LoraConfig::validate(const BackboneConfig& backbone) const {
  const int limit = backbone.model_dim / 4;  // d = k for Q and V
  if (rank < 1 || rank > limit) {
    throw ConfigError("lora: rank " + std::to_string(rank) + " outside [1, " + std::to_string(limit) +
                      "] for model_dim " + std::to_string(backbone.model_dim));
  }
  if (!(init_std > 0.0) || !std::isfinite(init_std)) throw ConfigError("lora: init_std must be positive");
}

std::vector<Matrix> LoraSet::deltas() const {
  std::vector<Matrix> out;
  out.reserve(adapters.size());
  for (const auto& a : adapters) out.push_back(a.delta());
  return out;
}

void LoraSet::validate() const {
  if (adapters.empty() || adapters.size() % 2 != 0) throw ConfigError("lora set: need one adapter per Q/V site");
  const Index r = rank();
  for (std::size_t s = 0; s < adapters.size(); ++s) {
    const auto& ad = adapters[s];
    if (ad.block != static_cast<int>(s / 2) || ad.projection != static_cast<Projection>(s % 2)) {
      throw ConfigError("lora set: adapter " + std::to_string(s) + " is out of site order");
    }
    if (ad.rank() != r || ad.b.rows() != r) throw ConfigError("lora set: ranks differ between sites");
  }
}

LoraSet init_lora(const BackboneConfig& backbone, const LoraConfig& config, std::uint64_t seed, SetRole role) {
  backbone.validate();
  config.validate(backbone);
  SeededRng rng(seed);
  const Index d = backbone.model_dim;
  LoraSet set;
  set.role = role;
  for (int block = 0; block < backbone.num_blocks; ++block) {
    for (Projection p : {Projection::Q, Projection::V}) {
      LoraAdapter ad;
      ad.block = block;
      ad.projection = p;
      ad.a = rng.normal_matrix(d, config.rank, config.init_std);
      ad.b = Matrix::Zero(config.rank, d);
      set.adapters.push_back(std::move(ad));
    }
  }
  return set;
}

MergeCoefficients MergeCoefficients::uniform(int num_blocks, double previous, double current) {
  MergeCoefficients c(num_blocks);
  for (std::size_t i = 0; i < c.values_.size(); ++i) c.values_[i] = i % 2 == 0 ? previous : current;
  return c;
}

void MergeCoefficients::validate(int num_blocks) const {
  if (values_.size() != static_cast<std::size_t>(8 * num_blocks)) {
    throw ConfigError("merge coefficients: expected " + std::to_string(8 * num_blocks) + ", have " +
                      std::to_string(values_.size()));
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw NumericError("merge coefficients: non-finite value");
  }
}

Matrix effective_weight(const Matrix& w, const LoraAdapter& adapter) {
  if (adapter.a.rows() != w.rows() || adapter.b.cols() != w.cols() || adapter.a.cols() != adapter.b.rows()) {
    throw DimensionError("effective_weight: W " + shape_string(w) + " vs A " + shape_string(adapter.a) + ", B " +
                         shape_string(adapter.b));
  }
  return w + adapter.a * adapter.b;
}

Var effective_weight(Var w, Var a, Var b) {
  if (w.requires_grad()) throw ConsistencyError("effective_weight: frozen weight must be a tape constant");
  if (a.rows() != w.rows() || b.cols() != w.cols()) throw DimensionError("effective_weight: shape mismatch");
  return add(w, matmul(a, b));
}

namespace {

void require_same_structure(const LoraSet& p, const LoraSet& c) {
  p.validate();
  c.validate();
  if (p.adapters.size() != c.adapters.size() || p.rank() != c.rank()) {
    throw ConfigError("merge: adapter sets differ in block count or rank");
  }
  for (std::size_t s = 0; s < p.adapters.size(); ++s) {
    if (p.adapters[s].a.rows() != c.adapters[s].a.rows() || p.adapters[s].b.cols() != c.adapters[s].b.cols()) {
      throw ConfigError("merge: site " + std::to_string(s) + " shapes differ");
    }
  }
}

}  // namespace

LoraSet merge_sets(const LoraSet& previous, const LoraSet& current, const MergeCoefficients& coeffs) {
  require_same_structure(previous, current);
  coeffs.validate(previous.num_blocks());
  LoraSet out;
  out.role = SetRole::Previous;
  for (std::size_t s = 0; s < previous.adapters.size(); ++s) {
    const auto& p = previous.adapters[s];
    const auto& c = current.adapters[s];
    LoraAdapter m;
    m.block = p.block;
    m.projection = p.projection;
    const auto lam = [&](FactorMatrix f, SetRole r) { return coeffs.at(p.block, p.projection, f, r); };
    m.a = lam(FactorMatrix::A, SetRole::Current) * c.a + lam(FactorMatrix::A, SetRole::Previous) * p.a;
    m.b = lam(FactorMatrix::B, SetRole::Current) * c.b + lam(FactorMatrix::B, SetRole::Previous) * p.b;
    out.adapters.push_back(std::move(m));
  }
  return out;
}

std::vector<Var> merged_site_deltas(Tape& tape, const LoraSet& previous, const LoraSet& current,
                                    std::span<const Var> coeffs) {
  require_same_structure(previous, current);
  if (coeffs.size() != static_cast<std::size_t>(8 * previous.num_blocks())) {
    throw DimensionError("merged_site_deltas: expected " + std::to_string(8 * previous.num_blocks()) +
                         " coefficients");
  }
  std::vector<Var> deltas;
  for (std::size_t s = 0; s < previous.adapters.size(); ++s) {
    const auto& p = previous.adapters[s];
    const auto& c = current.adapters[s];
    const auto lam = [&](FactorMatrix f, SetRole r) {
      return coeffs[MergeCoefficients::slot(p.block, p.projection, f, r)];
    };
    const Var a = scalar_mul(lam(FactorMatrix::A, SetRole::Current), tape.constant(c.a)) +
                  scalar_mul(lam(FactorMatrix::A, SetRole::Previous), tape.constant(p.a));
    const Var b = scalar_mul(lam(FactorMatrix::B, SetRole::Current), tape.constant(c.b)) +
                  scalar_mul(lam(FactorMatrix::B, SetRole::Previous), tape.constant(p.b));
    deltas.push_back(matmul(a, b));
  }
  return deltas;
}

double CosineReport::mean_abs_off_diagonal() const {
  const Index n = similarity.rows();
  if (n < 2) return std::nan("");
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i != j) sum += std::abs(similarity(i, j));
    }
  }
  return sum / static_cast<double>(n * (n - 1));
}

CosineReport cross_task_cosine(const std::vector<std::vector<Matrix>>& task_deltas) {
  if (task_deltas.size() < 2) throw ConfigError("cross_task_cosine: need at least 2 tasks");
  std::vector<Vector> flat;
  for (const auto& deltas : task_deltas) {
    Index total = 0;
    for (const Matrix& m : deltas) total += m.size();
    Vector v(total);
    Index at = 0;
    for (const Matrix& m : deltas) {
      v.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
      at += m.size();
    }
    if (!flat.empty() && v.size() != flat.front().size()) throw DimensionError("cross_task_cosine: shapes differ");
    flat.push_back(std::move(v));
  }
  CosineReport report;
  std::vector<Vector> unit;
  for (std::size_t t = 0; t < flat.size(); ++t) {
    const double norm = flat[t].norm();
    if (norm == 0.0) {
      spdlog::warn("cross_task_cosine: task {} has a zero delta and is excluded", t);
      report.excluded.push_back(t);
      continue;
    }
    report.kept.push_back(t);
    unit.push_back(flat[t] / norm);
  }
  const Index n = static_cast<Index>(unit.size());
  report.similarity = Matrix::Identity(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double c = std::clamp(unit[i].dot(unit[j]), -1.0, 1.0);
      report.similarity(i, j) = c;
      report.similarity(j, i) = c;
    }
  }
  return report;
}

std::vector<unsigned char> encode_lora(const LoraSet& set) {
  set.validate();
  io::BinaryWriter w;
  w.magic("DSRL");
  w.u32(static_cast<std::uint32_t>(set.num_blocks()));
  w.u32(static_cast<std::uint32_t>(set.rank()));
  w.u32(static_cast<std::uint32_t>(set.adapters.front().a.rows()));
  w.u32(static_cast<std::uint32_t>(set.adapters.front().b.cols()));
  w.u32(static_cast<std::uint32_t>(set.role));
  for (const auto& ad : set.adapters) {
    w.matrix(ad.a);
    w.matrix(ad.b);
  }
  return w.bytes();
}

LoraSet decode_lora(std::vector<unsigned char> bytes) {
  io::BinaryReader r(std::move(bytes));
  r.expect_magic("DSRL");
  const auto blocks = static_cast<int>(r.u32());
  const auto rank = static_cast<Index>(r.u32());
  const auto d = static_cast<Index>(r.u32());
  const auto k = static_cast<Index>(r.u32());
  const std::uint32_t role = r.u32();
  if (role > 1) throw IoError("lora checkpoint: bad role tag");
  LoraSet set;
  set.role = static_cast<SetRole>(role);
  for (int block = 0; block < blocks; ++block) {
    for (Projection p : {Projection::Q, Projection::V}) {
      LoraAdapter ad;
      ad.block = block;
      ad.projection = p;
      ad.a = r.matrix(d, rank);
      ad.b = r.matrix(rank, k);
      set.adapters.push_back(std::move(ad));
    }
  }
  r.expect_end();
  set.validate();
  return set;
}

void save_lora(const std::filesystem::path& path, const LoraSet& set) { io::write_file_atomic(path, encode_lora(set)); }

LoraSet load_lora(const std::filesystem::path& path) { return decode_lora(io::read_file(path)); }

}  // namespace desire
