#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/checkpoint.hpp"
#include "advnmt/data.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/params.hpp"
#include "advnmt/rng.hpp"
#include "advnmt/tape.hpp"

namespace advnmt {

struct AdversaryConfig {
  int image_size = 32;  // L_D; sequences are zero-padded or truncated to this
  int feature_maps = 20;
  int mlp_hidden = 20;
  double init_range = 0.08;
  // When set, the frozen embeddings are drawn fresh instead of snapshotting
  // the warm-started generator tables.
  bool independent_embeddings = false;

  void validate() const {
    if (image_size < 4) throw std::invalid_argument("adversary config: image_size must be >= 4");
    if (feature_maps < 1 || mlp_hidden < 1)
      throw std::invalid_argument("adversary config: feature/hidden sizes must be positive");
  }
};

// The sentence-pair classifier D(x, y): a 2D grid of concatenated word
// embeddings runs through two rounds of 3x3 convolution + batch norm + 2x2
// max pooling, then a sigmoid MLP head produces the probability that the
// pair is human-produced. Embedding tables are frozen snapshots of the
// warm-started generator and are never trained here.
class Adversary {
 public:
  Adversary(AdversaryConfig cfg, const Generator& warm_started, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const GeneratorConfig& g = warm_started.config();
    emb_dim_ = g.emb_dim;
    src_vocab_ = g.src_vocab;
    tgt_vocab_ = g.tgt_vocab;
    Rng rng = stream_rng(seed, kStreamInitD);
    if (cfg_.independent_embeddings) {
      src_emb_ = Tensor::zeros({src_vocab_, emb_dim_});
      tgt_emb_ = Tensor::zeros({tgt_vocab_, emb_dim_});
      for (double& v : src_emb_.data) v = rng.uniform(-cfg_.init_range, cfg_.init_range);
      for (double& v : tgt_emb_.data) v = rng.uniform(-cfg_.init_range, cfg_.init_range);
    } else {
      src_emb_ = warm_started.params().value("emb.src");
      tgt_emb_ = warm_started.params().value("emb.tgt");
    }
    init_params(rng);
  }

  const AdversaryConfig& config() const { return cfg_; }
  int embedding_dim() const { return emb_dim_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const Tensor& src_embeddings() const { return src_emb_; }
  const Tensor& tgt_embeddings() const { return tgt_emb_; }

  // z0[.,i,j] = [emb_x(x_i); emb_y(y_j)], zero vectors past each sequence
  // end; shape (2E, L, L).
  Tensor build_pair_image(const std::vector<int>& x, const std::vector<int>& y) const {
    if (x.empty() || y.empty()) throw std::invalid_argument("build_pair_image: empty sequence");
    const int L = cfg_.image_size;
    const int C = 2 * emb_dim_;
    Tensor img = Tensor::zeros({C, L, L});
    for (int i = 0; i < L; ++i) {
      const bool has_x = i < static_cast<int>(x.size());
      if (has_x) check_id(x[static_cast<std::size_t>(i)], src_vocab_, "source");
      for (int j = 0; j < L; ++j) {
        const bool has_y = j < static_cast<int>(y.size());
        if (has_y) check_id(y[static_cast<std::size_t>(j)], tgt_vocab_, "target");
        if (has_x)
          for (int e = 0; e < emb_dim_; ++e)
            img.at(e, i, j) = src_emb_.at(x[static_cast<std::size_t>(i)], e);
        if (has_y)
          for (int e = 0; e < emb_dim_; ++e)
            img.at(emb_dim_ + e, i, j) = tgt_emb_.at(y[static_cast<std::size_t>(j)], e);
      }
    }
    return img;
  }

  Tensor build_batch_images(const std::vector<SentencePair>& pairs) const {
    if (pairs.empty()) throw std::invalid_argument("build_batch_images: empty batch");
    const int L = cfg_.image_size;
    const int C = 2 * emb_dim_;
    Tensor out = Tensor::zeros({static_cast<int>(pairs.size()), C, L, L});
    std::size_t per = static_cast<std::size_t>(C) * L * L;
    for (std::size_t n = 0; n < pairs.size(); ++n) {
      Tensor one = build_pair_image(pairs[n].src, pairs[n].tgt);
      std::copy(one.data.begin(), one.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(n * per));
    }
    return out;
  }

  // Probability that (x, y) is ground truth. Train mode normalizes with
  // batch statistics and therefore needs a batch of at least two; single
  // pairs are scored in eval mode against the running stats.
  double discriminate(const std::vector<int>& x, const std::vector<int>& y, bool train = false) const {
    Tape tape(false);
    Tensor img = build_batch_images({SentencePair{x, y}});
    Var probs = forward(tape, tape.leaf(std::move(img)), train, /*update_running=*/false);
    return tape.value(probs).at(0);
  }

  std::vector<double> score_pairs(const std::vector<SentencePair>& pairs) const {
    Tape tape(false);
    Var probs = forward(tape, tape.leaf(build_batch_images(pairs)), /*train=*/false, /*update_running=*/false);
    const Tensor& v = tape.value(probs);
    return std::vector<double>(v.data.begin(), v.data.end());
  }

  // Mean binary cross entropy with label 1 on positives and 0 on negatives,
  // differentiable w.r.t. the adversary parameters only. Runs the stack in
  // train mode over the combined batch.
  Var adversary_loss(Tape& tape, const std::vector<SentencePair>& positives,
                     const std::vector<SentencePair>& negatives, bool update_running = true) {
    if (positives.empty() && negatives.empty())
      throw std::invalid_argument("adversary_loss: at least one example required");
    std::vector<SentencePair> all = positives;
    all.insert(all.end(), negatives.begin(), negatives.end());
    std::vector<double> labels(positives.size(), 1.0);
    labels.resize(all.size(), 0.0);
    Var probs = forward(tape, tape.leaf(build_batch_images(all)), /*train=*/all.size() >= 2, update_running);
    return tape.bce(probs, std::move(labels));
  }

  // conv1 -> bn1 -> pool -> conv2 -> bn2 -> pool -> flatten -> sigmoid MLP
  // -> sigmoid scalar head; input (N,C,L,L), output (N).
  Var forward(Tape& tape, Var images, bool train, bool update_running) const {
    auto& ps = const_cast<ParameterStore&>(params_);
    const Tensor& I = tape.value(images);
    if (I.ndim() != 4)
      throw std::invalid_argument("adversary forward: expected (N,C,L,L) images, got " + shape_str(I.shape));
    const int N = I.dim(0);
    Var c1 = tape.conv2d_3x3(images, tape.param(ps, "conv1.w"), tape.param(ps, "conv1.b"));
    Var n1 = tape.batch_norm(c1, tape.param(ps, "bn1.gamma"), tape.param(ps, "bn1.beta"), bn1_mean_, bn1_var_, train,
                             update_running);
    Var p1 = tape.maxpool_2x2(n1);
    Var c2 = tape.conv2d_3x3(p1, tape.param(ps, "conv2.w"), tape.param(ps, "conv2.b"));
    Var n2 = tape.batch_norm(c2, tape.param(ps, "bn2.gamma"), tape.param(ps, "bn2.beta"), bn2_mean_, bn2_var_, train,
                             update_running);
    Var p2 = tape.maxpool_2x2(n2);
    Var flat = tape.reshape(p2, {N, flat_dim()});
    Var h = tape.sigmoid(tape.add(tape.matmul(flat, tape.param(ps, "mlp.w")), tape.param(ps, "mlp.b")));
    Var o = tape.sigmoid(tape.add(tape.matmul(h, tape.param(ps, "out.w")), tape.param(ps, "out.b")));
    return tape.reshape(o, {N});
  }

  int flat_dim() const {
    const int l1 = (cfg_.image_size + 1) / 2;
    const int l2 = (l1 + 1) / 2;
    return cfg_.feature_maps * l2 * l2;
  }

  void save(const std::string& path) const {
    Checkpoint c;
    std::ostringstream meta;
    meta << "kind=adversary\n"
         << "image_size=" << cfg_.image_size << "\n"
         << "feature_maps=" << cfg_.feature_maps << "\n"
         << "mlp_hidden=" << cfg_.mlp_hidden << "\n"
         << "init_range=" << cfg_.init_range << "\n"
         << "independent_embeddings=" << (cfg_.independent_embeddings ? 1 : 0) << "\n"
         << "emb_dim=" << emb_dim_ << "\n"
         << "src_vocab=" << src_vocab_ << "\n"
         << "tgt_vocab=" << tgt_vocab_ << "\n";
    c.meta = meta.str();
    for (const auto& [name, e] : params_.entries()) {
      c.arrays.emplace(name, e.value);
      if (e.velocity.numel() > 0) c.arrays.emplace("vel." + name, e.velocity);
    }
    c.arrays.emplace("frozen.src_emb", src_emb_);
    c.arrays.emplace("frozen.tgt_emb", tgt_emb_);
    c.arrays.emplace("bn1.running_mean", bn1_mean_);
    c.arrays.emplace("bn1.running_var", bn1_var_);
    c.arrays.emplace("bn2.running_mean", bn2_mean_);
    c.arrays.emplace("bn2.running_var", bn2_var_);
    c.save(path);
  }

  static Adversary load(const std::string& path, const Generator& generator) {
    Checkpoint c = Checkpoint::load(path);
    if (c.meta_value("kind") != "adversary")
      throw std::runtime_error("checkpoint is not an adversary checkpoint (kind=" + c.meta_value("kind") + ")");
    AdversaryConfig cfg;
    cfg.image_size = std::stoi(c.meta_value("image_size"));
    cfg.feature_maps = std::stoi(c.meta_value("feature_maps"));
    cfg.mlp_hidden = std::stoi(c.meta_value("mlp_hidden"));
    cfg.init_range = std::stod(c.meta_value("init_range"));
    cfg.independent_embeddings = std::stoi(c.meta_value("independent_embeddings")) != 0;
    const int emb_dim = std::stoi(c.meta_value("emb_dim"));
    if (emb_dim != generator.config().emb_dim)
      throw std::runtime_error("embedding dim mismatch: adversary checkpoint has " + std::to_string(emb_dim) +
                               ", generator has " + std::to_string(generator.config().emb_dim));
    Adversary d(cfg, generator, 0);
    for (auto& [name, e] : d.params_.entries()) {
      const Tensor& stored = c.require(name);
      if (stored.shape != e.value.shape)
        throw std::runtime_error("checkpoint array '" + name + "' has shape " + shape_str(stored.shape) +
                                 ", expected " + shape_str(e.value.shape));
      e.value = stored;
      auto vel = c.arrays.find("vel." + name);
      if (vel != c.arrays.end()) e.velocity = vel->second;
    }
    d.src_emb_ = c.require("frozen.src_emb");
    d.tgt_emb_ = c.require("frozen.tgt_emb");
    d.bn1_mean_ = c.require("bn1.running_mean");
    d.bn1_var_ = c.require("bn1.running_var");
    d.bn2_mean_ = c.require("bn2.running_mean");
    d.bn2_var_ = c.require("bn2.running_var");
    return d;
  }

 private:
  void init_params(Rng& rng) {
    const int F = cfg_.feature_maps;
    const int C = 2 * emb_dim_;
    const double r = cfg_.init_range;
    params_.add_uniform("conv1.w", {F, C, 3, 3}, r, rng);
    params_.add_uniform("conv1.b", {F}, r, rng);
    params_.add("bn1.gamma", Tensor::full({F}, 1.0));
    params_.add("bn1.beta", Tensor::zeros({F}));
    params_.add_uniform("conv2.w", {F, F, 3, 3}, r, rng);
    params_.add_uniform("conv2.b", {F}, r, rng);
    params_.add("bn2.gamma", Tensor::full({F}, 1.0));
    params_.add("bn2.beta", Tensor::zeros({F}));
    params_.add_uniform("mlp.w", {flat_dim(), cfg_.mlp_hidden}, r, rng);
    params_.add_uniform("mlp.b", {cfg_.mlp_hidden}, r, rng);
    params_.add_uniform("out.w", {cfg_.mlp_hidden, 1}, r, rng);
    params_.add_uniform("out.b", {1}, r, rng);
    bn1_mean_ = Tensor::zeros({F});
    bn1_var_ = Tensor::full({F}, 1.0);
    bn2_mean_ = Tensor::zeros({F});
    bn2_var_ = Tensor::full({F}, 1.0);
  }

  void check_id(int id, int vocab, const char* side) const {
    if (id < 0 || id >= vocab)
      throw std::invalid_argument(std::string(side) + " token id " + std::to_string(id) +
                                  " out of range for vocabulary of size " + std::to_string(vocab));
  }

  AdversaryConfig cfg_;
  int emb_dim_ = 0;
  int src_vocab_ = 0;
  int tgt_vocab_ = 0;
  Tensor src_emb_, tgt_emb_;  // frozen; never receive gradients
  ParameterStore params_;
  mutable Tensor bn1_mean_, bn1_var_, bn2_mean_, bn2_var_;
};

}  // namespace advnmt
