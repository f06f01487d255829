#pragma once

// Parameter storage, checkpoint I/O, small network building blocks and
// first-order optimizers on top of the tape.

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "flowpose/diffgraph.hpp"
#include "flowpose/random.hpp"

namespace flowpose::dg {

class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);
  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const;
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  std::size_t find(const std::string& name) const;  // throws Load when absent

  // Registers every parameter as a leaf. Leaves are constants on a
  // non-recording tape.
  std::vector<Var> bind(Tape& tape) const;

  // Writes <base>.json (manifest: names, shapes, offsets, extra) and <base>.bin
  // (little-endian float64, manifest order).
  void save(const std::string& base, const nlohmann::json& extra = nlohmann::json::object()) const;
  // Returns the manifest's extra object.
  static ParamStore load(const std::string& base, nlohmann::json* extra = nullptr);

  // Copies values of same-named, same-shaped parameters from another store.
  void assign_from(const ParamStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

struct Linear {
  std::size_t weight = 0;  // in x out
  std::size_t bias = 0;    // 1 x out
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double init_scale = 1.0);
  Var operator()(std::span<const Var> params, Var x) const;
};

// Residual MLP: input projection, `blocks` residual blocks of width
// `hidden`, tanh activations, and an output projection. The output layer is
// zero-initialized so freshly built conditioners emit their bias.
struct ResMlp {
  Linear input;
  std::vector<Linear> block_a;
  std::vector<Linear> block_b;
  Linear output;

  static ResMlp create(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                       std::size_t blocks, std::size_t out, Rng& rng);
  Var operator()(std::span<const Var> params, Var x) const;
};

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" or "adam"
  double learning_rate = 1e-3;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const ParamStore& store);
  // Returns the gradient norm before clipping.
  double step(ParamStore& store, const std::vector<Tensor>& grads);
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

}  // namespace flowpose::dg
