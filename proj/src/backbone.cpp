#include "desire/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "desire/io.hpp"
#include "desire/numerics/optim.hpp"
#include "desire/numerics/rng.hpp"

namespace desire {

std::atomic<std::uint64_t> Classifier::evaluations_{0};

void BackboneConfig::validate() const {
  if (num_blocks < 1) throw ConfigError("backbone: num_blocks must be >= 1");
  if (model_dim < 1 || num_heads < 1 || model_dim % num_heads != 0) {
    throw ConfigError("backbone: model_dim must be divisible by num_heads");
  }
  if (mlp_hidden < 1) throw ConfigError("backbone: mlp_hidden must be >= 1");
  if (num_tokens < 1 || input_dim < num_tokens || input_dim % num_tokens != 0) {
    throw ConfigError("backbone: input_dim must be a positive multiple of num_tokens");
  }
}

namespace {

BackboneWeights allocate_backbone(const BackboneConfig& c) {
  c.validate();
  const Index d = c.model_dim;
  BackboneWeights w;
  w.embed_w = Matrix::Zero(c.token_dim(), d);
  w.embed_b = Matrix::Zero(1, d);
  w.position = Matrix::Zero(c.num_tokens, d);
  w.blocks.resize(static_cast<std::size_t>(c.num_blocks));
  for (auto& b : w.blocks) {
    b.ln1_gamma = Matrix::Ones(1, d);
    b.ln1_beta = Matrix::Zero(1, d);
    for (Matrix* m : {&b.w_q, &b.w_k, &b.w_v, &b.w_o}) *m = Matrix::Zero(d, d);
    for (Matrix* m : {&b.b_q, &b.b_k, &b.b_v, &b.b_o}) *m = Matrix::Zero(1, d);
    b.ln2_gamma = Matrix::Ones(1, d);
    b.ln2_beta = Matrix::Zero(1, d);
    b.w_1 = Matrix::Zero(d, c.mlp_hidden);
    b.b_1 = Matrix::Zero(1, c.mlp_hidden);
    b.w_2 = Matrix::Zero(c.mlp_hidden, d);
    b.b_2 = Matrix::Zero(1, d);
  }
  w.final_gamma = Matrix::Ones(1, d);
  w.final_beta = Matrix::Zero(1, d);
  return w;
}

// Rows (n * tokens) x tokens selecting the position row of each token.
Matrix position_tiling(Index samples, Index tokens) {
  Matrix tile = Matrix::Zero(samples * tokens, tokens);
  for (Index s = 0; s < samples; ++s) {
    for (Index t = 0; t < tokens; ++t) tile(s * tokens + t, t) = 1.0;
  }
  return tile;
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

}  // namespace

BackboneWeights init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  BackboneWeights w = allocate_backbone(config);
  SeededRng rng(seed);
  const double d = config.model_dim;
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.num_blocks);
  w.embed_w = rng.normal_matrix(w.embed_w.rows(), w.embed_w.cols(), 1.0 / std::sqrt(double(config.token_dim())));
  w.position = rng.normal_matrix(w.position.rows(), w.position.cols(), 0.5);
  for (auto& b : w.blocks) {
    for (Matrix* m : {&b.w_q, &b.w_k, &b.w_v}) *m = rng.normal_matrix(m->rows(), m->cols(), 1.0 / std::sqrt(d));
    b.w_o = rng.normal_matrix(b.w_o.rows(), b.w_o.cols(), residual_scale / std::sqrt(d));
    b.w_1 = rng.normal_matrix(b.w_1.rows(), b.w_1.cols(), 1.0 / std::sqrt(d));
    b.w_2 = rng.normal_matrix(b.w_2.rows(), b.w_2.cols(), residual_scale / std::sqrt(double(config.mlp_hidden)));
  }
  return w;
}

namespace {

template <typename MakeVar>
BoundBackbone bind(const BackboneWeights& weights, MakeVar make) {
  BoundBackbone net;
  net.blocks.resize(weights.blocks.size());
  std::vector<Var*> slots;
  net.for_each([&](Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  weights.for_each([&](const Matrix& m) { *slots[i++] = make(m); });
  return net;
}

}  // namespace

BoundBackbone bind_constant(Tape& tape, const BackboneWeights& weights) {
  return bind(weights, [&](const Matrix& m) { return tape.constant(m); });
}

BoundBackbone bind_variables(Tape& tape, const BackboneWeights& weights) {
  return bind(weights, [&](const Matrix& m) { return tape.variable(m); });
}

std::uint64_t checksum(const BackboneWeights& weights) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  weights.for_each([&](const Matrix& m) { h = checksum(m, h); });
  return h;
}

Var embed_tokens(Tape& tape, const BoundBackbone& net, const BackboneConfig& config, const Matrix& inputs) {
  if (inputs.cols() != config.input_dim) {
    throw DimensionError("backbone: input has " + std::to_string(inputs.cols()) + " columns, expected " +
                         std::to_string(config.input_dim));
  }
  const Index samples = inputs.rows();
  const Index tokens = config.num_tokens;
  // Row-major storage: each input row is `tokens` consecutive token vectors.
  const Matrix token_rows = Eigen::Map<const Matrix>(inputs.data(), samples * tokens, config.token_dim());
  const Var x = tape.constant(token_rows);
  const Var embedded = linear(x, net.embed_w, net.embed_b);
  const Var positions = matmul(tape.constant(position_tiling(samples, tokens)), net.position);
  return add(embedded, positions);
}

Var encode_tokens(const BoundBackbone& net, const BackboneConfig& config, Var tokens, Index tokens_per_sample,
                  std::span<const Var> site_deltas) {
  if (!site_deltas.empty() && static_cast<int>(site_deltas.size()) != config.num_sites()) {
    throw DimensionError("backbone: expected " + std::to_string(config.num_sites()) + " site deltas, got " +
                         std::to_string(site_deltas.size()));
  }
  auto with_delta = [&](Var w, std::size_t site) {
    if (site_deltas.empty() || !site_deltas[site].valid()) return w;
    return add(w, site_deltas[site]);
  };
  Var h = tokens;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& b = net.blocks[i];
    const Var x = layer_norm_rows(h, b.ln1_gamma, b.ln1_beta);
    const Var q = linear(x, with_delta(b.w_q, 2 * i), b.b_q);
    const Var k = linear(x, b.w_k, b.b_k);
    const Var v = linear(x, with_delta(b.w_v, 2 * i + 1), b.b_v);
    const Var attended = attention(q, k, v, config.num_heads, tokens_per_sample);
    h = add(h, linear(attended, b.w_o, b.b_o));
    const Var x2 = layer_norm_rows(h, b.ln2_gamma, b.ln2_beta);
    h = add(h, linear(gelu(linear(x2, b.w_1, b.b_1)), b.w_2, b.b_2));
  }
  return mean_pool(layer_norm_rows(h, net.final_gamma, net.final_beta), tokens_per_sample);
}

Var forward_features(Tape& tape, const BoundBackbone& net, const BackboneConfig& config, const Matrix& inputs,
                     std::span<const Var> site_deltas) {
  return encode_tokens(net, config, embed_tokens(tape, net, config, inputs), config.num_tokens, site_deltas);
}

Matrix extract_features(const BackboneWeights& weights, const BackboneConfig& config, const Matrix& inputs,
                        const std::vector<Matrix>& site_deltas, Index chunk) {
  Matrix out(inputs.rows(), config.model_dim);
  for (Index start = 0; start < inputs.rows(); start += chunk) {
    const Index n = std::min(chunk, inputs.rows() - start);
    Tape tape;
    const BoundBackbone net = bind_constant(tape, weights);
    std::vector<Var> deltas;
    for (const Matrix& d : site_deltas) deltas.push_back(tape.constant(d));
    const Matrix rows = inputs.middleRows(start, n);
    out.middleRows(start, n) = forward_features(tape, net, config, rows, deltas).value();
  }
  return out;
}

// ---------------------------------------------------------------------------

Index Classifier::row_of(int class_id) const {
  const auto it = std::find(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end()) throw ConsistencyError("classifier: unknown class " + std::to_string(class_id));
  return static_cast<Index>(it - class_ids.begin());
}

Matrix Classifier::logits(const Matrix& features) const {
  evaluations_.fetch_add(1, std::memory_order_relaxed);
  if (features.cols() != feature_dim()) throw DimensionError("classifier: feature width mismatch");
  Matrix out = features * weight.transpose();
  out.rowwise() += bias.row(0);
  return out;
}

std::vector<int> Classifier::predict(const Matrix& features) const {
  if (class_ids.empty()) throw ConsistencyError("classifier: no classes");
  const Matrix scores = logits(features);
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Index r = 0; r < scores.rows(); ++r) {
    Index best = 0;
    scores.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = class_ids[static_cast<std::size_t>(best)];
  }
  return out;
}

std::uint64_t Classifier::evaluation_count() { return evaluations_.load(std::memory_order_relaxed); }

Classifier expand_classifier(const Classifier& classifier, const std::vector<int>& new_class_ids) {
  if (new_class_ids.empty()) throw ConfigError("expand_classifier: need at least one new class");
  for (int id : new_class_ids) {
    if (std::find(classifier.class_ids.begin(), classifier.class_ids.end(), id) != classifier.class_ids.end()) {
      throw ConsistencyError("expand_classifier: class " + std::to_string(id) + " already present");
    }
  }
  const Index old_c = classifier.seen_classes();
  const Index new_c = old_c + static_cast<Index>(new_class_ids.size());
  Classifier out(classifier.feature_dim());
  out.weight = Matrix::Zero(new_c, classifier.feature_dim());
  out.weight.topRows(old_c) = classifier.weight;
  out.bias = Matrix::Zero(1, new_c);
  out.bias.leftCols(old_c) = classifier.bias;
  out.class_ids = classifier.class_ids;
  out.class_ids.insert(out.class_ids.end(), new_class_ids.begin(), new_class_ids.end());
  return out;
}

std::uint64_t checksum(const Classifier& classifier) {
  std::uint64_t h = checksum(classifier.weight);
  h = checksum(classifier.bias, h);
  return fnv1a(classifier.class_ids.data(), classifier.class_ids.size() * sizeof(int), h);
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) throw DimensionError("accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------

PretrainResult pretrain_backbone(const Dataset& train, const Dataset& heldout, const std::set<int>& stream_classes,
                                 const BackboneConfig& config, const PretrainConfig& options) {
  config.validate();
  train.validate();
  heldout.validate();
  std::vector<int> overlap;
  for (const Dataset* d : {&train, &heldout}) {
    for (int c : d->classes()) {
      if (stream_classes.contains(c) && std::find(overlap.begin(), overlap.end(), c) == overlap.end()) {
        overlap.push_back(c);
      }
    }
  }
  if (!overlap.empty()) {
    std::string ids;
    for (int c : overlap) ids += (ids.empty() ? "" : ",") + std::to_string(c);
    throw LeakageError("pretraining classes overlap the incremental stream: " + ids);
  }
  if (train.size() == 0) throw ConfigError("pretrain: empty training set");
  if (options.epochs < 1 || options.batch_size < 1) throw ConfigError("pretrain: epochs and batch size must be >= 1");

  const std::set<int> classes = train.classes();
  std::vector<int> class_list(classes.begin(), classes.end());
  auto local_label = [&](int id) {
    return static_cast<int>(std::lower_bound(class_list.begin(), class_list.end(), id) - class_list.begin());
  };

  SeededRng rng(options.seed);
  PretrainResult result;
  result.weights = init_backbone(config, rng.fork("init").next_u64());
  Matrix head_w = rng.fork("head").normal_matrix(static_cast<Index>(class_list.size()), config.model_dim, 0.01);
  Matrix head_b = Matrix::Zero(1, static_cast<Index>(class_list.size()));

  std::vector<Matrix*> params;
  result.weights.for_each([&](Matrix& m) { params.push_back(&m); });
  params.push_back(&head_w);
  params.push_back(&head_b);

  SgdMomentum opt(options.learning_rate, options.momentum);
  SeededRng order_rng = rng.fork("order");
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    opt.set_learning_rate(cosine_anneal_lr(epoch, options.epochs, options.learning_rate));
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    Index batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      const std::vector<Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      const Dataset batch = train.rows(idx);
      std::vector<int> labels;
      for (int y : batch.labels) labels.push_back(local_label(y));

      Tape tape;
      const BoundBackbone net = bind_variables(tape, result.weights);
      const Var hw = tape.variable(head_w);
      const Var hb = tape.variable(head_b);
      const Var z = forward_features(tape, net, config, batch.inputs);
      const Var loss = cross_entropy(add_row(matmul_transposed(z, hw), hb), labels);
      tape.backward(loss);

      std::vector<const Matrix*> grads;
      net.for_each([&](const Var& v) { grads.push_back(&tape.grad(v)); });
      grads.push_back(&tape.grad(hw));
      grads.push_back(&tape.grad(hb));
      opt.step(params, grads);
      loss_sum += loss.value()(0, 0);
      ++batches;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
  }

  if (heldout.size() > 0) {
    const Matrix z = extract_features(result.weights, config, heldout.inputs);
    Matrix scores = z * head_w.transpose();
    scores.rowwise() += head_b.row(0);
    std::vector<int> predicted;
    for (Index r = 0; r < scores.rows(); ++r) {
      Index best = 0;
      scores.row(r).maxCoeff(&best);
      predicted.push_back(class_list[static_cast<std::size_t>(best)]);
    }
    result.heldout_accuracy = accuracy(predicted, heldout.labels);
  }
  if (result.heldout_accuracy < options.min_accuracy) {
    throw ConsistencyError("pretrain: held-out accuracy " + std::to_string(result.heldout_accuracy) +
                           " below sanity gate " + std::to_string(options.min_accuracy));
  }
  return result;
}

// ---------------------------------------------------------------------------

std::vector<unsigned char> encode_backbone(const BackboneConfig& config, const BackboneWeights& weights) {
  config.validate();
  io::BinaryWriter w;
  w.magic("DSRB");
  w.u32(1);
  for (int field : {config.num_blocks, config.model_dim, config.num_heads, config.mlp_hidden, config.input_dim,
                    config.num_tokens}) {
    w.u32(static_cast<std::uint32_t>(field));
  }
  const BackboneWeights shapes = allocate_backbone(config);
  std::vector<const Matrix*> expected;
  shapes.for_each([&](const Matrix& m) { expected.push_back(&m); });
  std::size_t i = 0;
  weights.for_each([&](const Matrix& m) {
    if (i >= expected.size() || m.rows() != expected[i]->rows() || m.cols() != expected[i]->cols()) {
      throw DimensionError("backbone checkpoint: tensor shape does not match config");
    }
    ++i;
    w.matrix(m);
  });
  return w.bytes();
}

std::pair<BackboneConfig, BackboneWeights> decode_backbone(std::vector<unsigned char> bytes) {
  io::BinaryReader r(std::move(bytes));
  r.expect_magic("DSRB");
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("backbone checkpoint: unsupported version " + std::to_string(version));
  BackboneConfig c;
  for (int* field : {&c.num_blocks, &c.model_dim, &c.num_heads, &c.mlp_hidden, &c.input_dim, &c.num_tokens}) {
    *field = static_cast<int>(r.u32());
  }
  BackboneWeights w = allocate_backbone(c);
  w.for_each([&](Matrix& m) { m = r.matrix(m.rows(), m.cols()); });
  r.expect_end();
  return {c, std::move(w)};
}

void save_backbone(const std::filesystem::path& path, const BackboneConfig& config, const BackboneWeights& weights) {
  io::write_file_atomic(path, encode_backbone(config, weights));
}

std::pair<BackboneConfig, BackboneWeights> load_backbone(const std::filesystem::path& path) {
  return decode_backbone(io::read_file(path));
}

}  // namespace desire
