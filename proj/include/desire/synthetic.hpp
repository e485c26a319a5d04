#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "desire/data.hpp"

namespace desire {

/// Generator for the desk-scale class-incremental benchmark. Every class is an
/// anisotropic Gaussian in a latent space, pushed through one random
/// nonlinear warp shared by all classes.
struct SyntheticSpec {
  int num_classes = 20;
  /// The first `pretrain_classes` ids are reserved for backbone pretraining;
  /// the rest form the incremental stream.
  int pretrain_classes = 10;
  int input_dim = 32;
  int latent_dim = 12;
  int samples_per_class = 400;
  double train_fraction = 0.5;
  int warp_depth = 3;
  double warp_strength = 1.5;
  double class_spread = 0.8;
  /// Per-axis latent standard deviations are drawn from U[class_scale / 4, class_scale].
  double class_scale = 0.6;
  double noise = 0.05;
  std::uint64_t seed = 7;

  int stream_classes() const { return num_classes - pretrain_classes; }
  int train_per_class() const;
  void validate() const;
};

struct SyntheticData {
  Dataset pretrain_train;
  Dataset pretrain_test;
  Dataset stream_train;
  Dataset stream_test;
  std::vector<int> pretrain_class_ids;
  std::vector<int> stream_class_ids;
};

/// Class c's distribution and samples depend only on (seed, c), not on the
/// total class count.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace desire
