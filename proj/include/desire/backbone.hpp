#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "desire/data.hpp"
#include "desire/numerics/autodiff.hpp"

namespace desire {

struct BackboneConfig {
  int num_blocks = 4;
  int model_dim = 64;
  int num_heads = 4;
  int mlp_hidden = 128;
  int input_dim = 32;
  /// Inputs are split into this many tokens of input_dim / num_tokens values.
  int num_tokens = 8;

  int token_dim() const { return input_dim / num_tokens; }
  /// Two LoRA sites (Q, V) per block.
  int num_sites() const { return 2 * num_blocks; }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

/// Weights of one pre-LN transformer block. Linear maps are stored (in x out)
/// and applied as x * W, so a LoRA delta A * B has the same shape as W.
template <typename T>
struct BlockTensors {
  T ln1_gamma, ln1_beta;
  T w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  T ln2_gamma, ln2_beta;
  T w_1, b_1, w_2, b_2;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (auto* t : {&self.ln1_gamma, &self.ln1_beta, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v,
                    &self.b_v, &self.w_o, &self.b_o, &self.ln2_gamma, &self.ln2_beta, &self.w_1, &self.b_1,
                    &self.w_2, &self.b_2}) {
      f(*t);
    }
  }
};

/// All backbone tensors, generic over storage (Matrix for weights, Var once
/// bound to a tape). Declaration order is the checkpoint order.
template <typename T>
struct BackboneTensors {
  T embed_w, embed_b, position;
  std::vector<BlockTensors<T>> blocks;
  T final_gamma, final_beta;

  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(self.embed_w);
    f(self.embed_b);
    f(self.position);
    for (auto& block : self.blocks) BlockTensors<T>::visit(block, f);
    f(self.final_gamma);
    f(self.final_beta);
  }
};

using BackboneWeights = BackboneTensors<Matrix>;
using BoundBackbone = BackboneTensors<Var>;

/// Random initialization for pretraining.
BackboneWeights init_backbone(const BackboneConfig& config, std::uint64_t seed);

BoundBackbone bind_constant(Tape& tape, const BackboneWeights& weights);
BoundBackbone bind_variables(Tape& tape, const BackboneWeights& weights);

std::uint64_t checksum(const BackboneWeights& weights);

/// Input rows (n x input_dim) -> token rows ((n * num_tokens) x model_dim).
Var embed_tokens(Tape& tape, const BoundBackbone& net, const BackboneConfig& config, const Matrix& inputs);

/// Transformer blocks, final norm and mean pooling over each sequence of
/// `tokens_per_sample` rows. `site_deltas` is empty or holds one additive
/// weight delta per site (block-major, Q then V); invalid entries mean none.
Var encode_tokens(const BoundBackbone& net, const BackboneConfig& config, Var tokens, Index tokens_per_sample,
                  std::span<const Var> site_deltas = {});

/// z for each input row: (n x input_dim) -> (n x model_dim).
Var forward_features(Tape& tape, const BoundBackbone& net, const BackboneConfig& config, const Matrix& inputs,
                     std::span<const Var> site_deltas = {});

/// Gradient-free feature extraction in chunks, with fixed per-site deltas
/// (empty for the plain frozen backbone).
Matrix extract_features(const BackboneWeights& weights, const BackboneConfig& config, const Matrix& inputs,
                        const std::vector<Matrix>& site_deltas = {}, Index chunk = 256);

/// Linear head over all seen classes. Rows are appended in the order classes
/// are observed and never reordered.
struct Classifier {
  Matrix weight;  // C x d
  Matrix bias;    // 1 x C
  std::vector<int> class_ids;

  explicit Classifier(Index feature_dim = 0) : weight(0, feature_dim), bias(1, 0) {}

  Index seen_classes() const { return static_cast<Index>(class_ids.size()); }
  Index feature_dim() const { return weight.cols(); }
  /// Row of a class id; throws ConsistencyError if unknown.
  Index row_of(int class_id) const;

  Matrix logits(const Matrix& features) const;
  std::vector<int> predict(const Matrix& features) const;

  /// Number of logits() calls so far, for instrumentation.
  static std::uint64_t evaluation_count();

 private:
  static std::atomic<std::uint64_t> evaluations_;
};

/// Appends zero-initialized rows for `new_class_ids`; old rows stay bit-identical.
Classifier expand_classifier(const Classifier& classifier, const std::vector<int>& new_class_ids);

std::uint64_t checksum(const Classifier& classifier);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

struct PretrainConfig {
  int epochs = 15;
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 64;
  std::uint64_t seed = 0;
  /// Held-out accuracy the pretrained backbone must reach (0 disables).
  double min_accuracy = 0.70;
};

struct PretrainResult {
  BackboneWeights weights;
  double heldout_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

/// Supervised pretraining with a throwaway head on classes disjoint from the
/// incremental stream, then freeze. Throws LeakageError on any overlap.
PretrainResult pretrain_backbone(const Dataset& train, const Dataset& heldout, const std::set<int>& stream_classes,
                                 const BackboneConfig& config, const PretrainConfig& options);

/// "DSRB" checkpoint: magic, u32 version, u32 config fields, then every
/// tensor in declaration order as f64, little-endian.
std::vector<unsigned char> encode_backbone(const BackboneConfig& config, const BackboneWeights& weights);
std::pair<BackboneConfig, BackboneWeights> decode_backbone(std::vector<unsigned char> bytes);
void save_backbone(const std::filesystem::path& path, const BackboneConfig& config, const BackboneWeights& weights);
std::pair<BackboneConfig, BackboneWeights> load_backbone(const std::filesystem::path& path);

}  // namespace desire
