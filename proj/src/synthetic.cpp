#include "desire/synthetic.hpp"

#include <cmath>

#include "desire/numerics/rng.hpp"

namespace desire {

int SyntheticSpec::train_per_class() const {
  return static_cast<int>(std::lround(train_fraction * samples_per_class));
}

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (pretrain_classes < 1 || pretrain_classes >= num_classes) {
    throw ConfigError("synthetic: class budget " + std::to_string(num_classes) + " cannot hold " +
                      std::to_string(pretrain_classes) + " pretraining classes plus a stream");
  }
  if (input_dim < 1 || latent_dim < 1) throw ConfigError("synthetic: dimensions must be positive");
  if (!(class_scale > 0.0)) throw ConfigError("synthetic: class scale must be positive");
  if (warp_depth < 0) throw ConfigError("synthetic: warp depth must be >= 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("synthetic: train fraction in (0,1)");
  const int train = train_per_class();
  if (samples_per_class < 4 || train < 2 || samples_per_class - train < 2) {
    throw ConfigError("synthetic: need at least 2 train and 2 test samples per class");
  }
}

namespace {

struct Warp {
  std::vector<Matrix> mix;
  std::vector<Vector> offset;
  Matrix projection;
  double strength = 1.0;

  Vector apply(Vector h) const {
    for (std::size_t k = 0; k < mix.size(); ++k) {
      const Vector pre = mix[k] * h + offset[k];
      h += strength * pre.array().tanh().matrix();
    }
    return projection * h;
  }
};

Matrix random_rotation(SeededRng& rng, Index n) {
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ();
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const SeededRng root(spec.seed);
  const Index latent = spec.latent_dim;

  Warp warp;
  warp.strength = spec.warp_strength;
  SeededRng warp_rng = root.fork("warp");
  for (int k = 0; k < spec.warp_depth; ++k) {
    warp.mix.push_back(warp_rng.normal_matrix(latent, latent, 1.2 / std::sqrt(double(latent))));
    warp.offset.push_back(warp_rng.normal_matrix(latent, 1, 0.5));
  }
  warp.projection = warp_rng.normal_matrix(spec.input_dim, latent, 1.0 / std::sqrt(double(latent)));

  SyntheticData out;
  const int train_n = spec.train_per_class();
  const int test_n = spec.samples_per_class - train_n;
  for (int c = 0; c < spec.num_classes; ++c) {
    SeededRng class_rng = root.fork(std::uint64_t{1000} + static_cast<std::uint64_t>(c));
    const Vector center = class_rng.normal_matrix(latent, 1, spec.class_spread);
    const Matrix rotation = random_rotation(class_rng, latent);
    Vector scales(latent);
    for (Index i = 0; i < latent; ++i) scales(i) = class_rng.uniform(0.25 * spec.class_scale, spec.class_scale);
    const Matrix shape = rotation * scales.asDiagonal();

    SeededRng sample_rng = root.fork(std::uint64_t{5000} + static_cast<std::uint64_t>(c));
    Dataset train;
    Dataset test;
    train.inputs.resize(train_n, spec.input_dim);
    test.inputs.resize(test_n, spec.input_dim);
    for (int j = 0; j < spec.samples_per_class; ++j) {
      const Vector z = center + shape * sample_rng.normal_matrix(latent, 1);
      const Vector noise = sample_rng.normal_matrix(spec.input_dim, 1, spec.noise);
      const Vector x = warp.apply(z) + noise;
      if (j < train_n) {
        train.inputs.row(j) = x.transpose();
        train.labels.push_back(c);
      } else {
        test.inputs.row(j - train_n) = x.transpose();
        test.labels.push_back(c);
      }
    }
    if (c < spec.pretrain_classes) {
      out.pretrain_class_ids.push_back(c);
      out.pretrain_train.append(train);
      out.pretrain_test.append(test);
    } else {
      out.stream_class_ids.push_back(c);
      out.stream_train.append(train);
      out.stream_test.append(test);
    }
  }
  return out;
}

}  // namespace desire
