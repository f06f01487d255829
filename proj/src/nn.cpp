#include "flowpose/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace flowpose::dg {

std::size_t ParamStore::add(std::string name, Tensor init) {
  for (const auto& n : names_) {
    if (n == name) throw Error(ErrorKind::Contract, "duplicate parameter name " + name);
  }
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(init));
  return tensors_.size() - 1;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::size_t ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw Error(ErrorKind::Load, "parameter " + name + " not found");
}

std::vector<Var> ParamStore::bind(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(tape.leaf(t));
  return out;
}

namespace {

void put_le(std::ofstream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(bytes), 8);
}

double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string base_name(const std::string& path) {
  const auto pos = path.find_last_of('/');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

}  // namespace

void ParamStore::save(const std::string& base, const nlohmann::json& extra) const {
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["byte_order"] = "little";
  manifest["dtype"] = "float64";
  manifest["blob"] = base_name(base) + ".bin";
  manifest["extra"] = extra;
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    params.push_back({{"name", names_[i]},
                      {"shape", {tensors_[i].rows(), tensors_[i].cols()}},
                      {"offset", offset}});
    offset += tensors_[i].size();
  }
  manifest["params"] = params;
  manifest["count"] = offset;

  std::ofstream js(base + ".json");
  if (!js) throw Error(ErrorKind::Config, "cannot write " + base + ".json");
  js << manifest.dump(2) << "\n";
  std::ofstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw Error(ErrorKind::Config, "cannot write " + base + ".bin");
  for (const auto& t : tensors_) {
    for (double v : t.vec()) put_le(bin, v);
  }
}

ParamStore ParamStore::load(const std::string& base, nlohmann::json* extra) {
  std::ifstream js(base + ".json");
  if (!js) throw Error(ErrorKind::Load, "cannot open " + base + ".json");
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Load, std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format_version", 0) != 1) throw Error(ErrorKind::Load, "unsupported checkpoint version");
  std::ifstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw Error(ErrorKind::Load, "cannot open " + base + ".bin");
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  ParamStore store;
  for (const auto& p : manifest.at("params")) {
    const std::size_t rows = p.at("shape").at(0);
    const std::size_t cols = p.at("shape").at(1);
    const std::size_t offset = p.at("offset");
    if ((offset + rows * cols) * 8 > blob.size()) throw Error(ErrorKind::Load, "checkpoint blob too short");
    Tensor t(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = get_le(blob.data() + (offset + i) * 8);
    store.add(p.at("name"), std::move(t));
  }
  if (extra) *extra = manifest.value("extra", nlohmann::json::object());
  return store;
}

void ParamStore::assign_from(const ParamStore& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    for (std::size_t j = 0; j < names_.size(); ++j) {
      if (names_[j] == other.name(i)) {
        if (!tensors_[j].same_shape(other.tensor(i))) {
          throw Error(ErrorKind::Load, "parameter " + names_[j] + " has a different shape in the checkpoint");
        }
        tensors_[j] = other.tensor(i);
      }
    }
  }
}

// ---------------------------------------------------------------- layers

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      double init_scale) {
  Linear l;
  l.in = in;
  l.out = out;
  Tensor w(in, out);
  const double bound = init_scale * std::sqrt(6.0 / static_cast<double>(in + out));
  if (init_scale != 0.0) {
    for (double& v : w.vec()) v = rng.uniform(-bound, bound);
  }
  l.weight = store.add(name + ".weight", std::move(w));
  l.bias = store.add(name + ".bias", Tensor(1, out));
  return l;
}

Var Linear::operator()(std::span<const Var> params, Var x) const {
  return add(matmul(x, params[weight]), params[bias]);
}

ResMlp ResMlp::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                      std::size_t blocks, std::size_t out, Rng& rng) {
  ResMlp net;
  net.input = Linear::create(store, name + ".in", in, hidden, rng);
  for (std::size_t b = 0; b < blocks; ++b) {
    net.block_a.push_back(Linear::create(store, name + ".block" + std::to_string(b) + ".a", hidden, hidden, rng));
    // small second layer keeps each block close to the identity at start
    net.block_b.push_back(
        Linear::create(store, name + ".block" + std::to_string(b) + ".b", hidden, hidden, rng, 0.1));
  }
  net.output = Linear::create(store, name + ".out", hidden, out, rng, 0.0);
  return net;
}

Var ResMlp::operator()(std::span<const Var> params, Var x) const {
  Var h = input(params, x);
  for (std::size_t b = 0; b < block_a.size(); ++b) {
    h = h + block_b[b](params, tanh(block_a[b](params, tanh(h))));
  }
  return output(params, tanh(h));
}

// ---------------------------------------------------------------- optimizers

Optimizer::Optimizer(OptimizerConfig cfg, const ParamStore& store) : cfg_(std::move(cfg)) {
  if (cfg_.kind != "sgd" && cfg_.kind != "adam") throw Error(ErrorKind::Config, "unknown optimizer " + cfg_.kind);
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store.tensor(i).rows(), store.tensor(i).cols());
    v_.emplace_back(store.tensor(i).rows(), store.tensor(i).cols());
  }
}

double Optimizer::step(ParamStore& store, const std::vector<Tensor>& grads) {
  if (grads.size() != store.size()) throw Error(ErrorKind::Shape, "gradient count does not match parameters");
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.vec()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorKind::TrainingAborted, "non-finite gradient");
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double lr = cfg_.learning_rate;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.tensor(i).vec();
    const auto& g = grads[i].vec();
    if (cfg_.kind == "sgd") {
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * clip * g[k];
    } else {
      auto& m = m_[i].vec();
      auto& v = v_[i].vec();
      const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = clip * g[k];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.epsilon);
      }
    }
  }
  return norm;
}

}  // namespace flowpose::dg
