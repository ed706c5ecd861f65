#include "s2st/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "s2st/common.hpp"

namespace s2st::nn {

ad::Var ParamStore::add(const std::string& name, ad::Mat value) {
  for (const Entry& e : entries_) {
    if (e.name == name) throw ConfigError("duplicate parameter name: " + name);
  }
  ad::Var v(std::move(value), /*requires_grad=*/true);
  entries_.push_back({name, v});
  return v;
}

ad::Var ParamStore::xavier(const std::string& name, int rows, int cols, std::mt19937_64& rng) {
  double limit = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  ad::Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return add(name, std::move(m));
}

ad::Var ParamStore::zeros(const std::string& name, int rows, int cols) {
  return add(name, ad::Mat::Zero(rows, cols));
}

ad::Var ParamStore::ones(const std::string& name, int rows, int cols) {
  return add(name, ad::Mat::Ones(rows, cols));
}

ad::Var ParamStore::constant(const std::string& name, int rows, int cols, double value) {
  return add(name, ad::Mat::Constant(rows, cols, value));
}

ParamStore::Entry* ParamStore::find(const std::string& name) {
  for (Entry& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

size_t ParamStore::parameter_count() const {
  size_t n = 0;
  for (const Entry& e : entries_) n += static_cast<size_t>(e.var.v().size());
  return n;
}

void ParamStore::zero_grads() {
  for (Entry& e : entries_) e.var.zero_grad();
}

uint64_t ParamStore::checksum() const {
  uint64_t h = kFnvOffset;
  for (const Entry& e : entries_) {
    h = hash_mix(h, e.name);
    const double* data = e.var.v().data();
    for (Eigen::Index i = 0; i < e.var.v().size(); ++i) {
      uint64_t bits;
      std::memcpy(&bits, &data[i], sizeof bits);
      h = hash_mix(h, bits);
    }
  }
  return h;
}

Adam::Adam(const ParamStore& params, AdamConfig config) : cfg_(config) {
  for (const auto& e : params.entries()) {
    m_.push_back(ad::Mat::Zero(e.var.v().rows(), e.var.v().cols()));
    v_.push_back(ad::Mat::Zero(e.var.v().rows(), e.var.v().cols()));
  }
}

void Adam::step(ParamStore& params, double lr) {
  if (m_.size() != params.entries().size()) throw ShapeError("adam: parameter set changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < m_.size(); ++i) {
    auto& e = params.entries()[i];
    if (!e.var.has_grad()) continue;
    const ad::Mat& g = e.var.node->grad;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    ad::Mat mhat = m_[i] / bc1;
    ad::Mat vhat = v_[i] / bc2;
    e.var.node->value -=
        lr * mhat.cwiseQuotient(vhat.cwiseSqrt() + ad::Mat::Constant(vhat.rows(), vhat.cols(), cfg_.epsilon));
  }
}

double inverse_sqrt_lr(int64_t step, double peak, int64_t warmup) {
  if (step < 1) step = 1;
  if (warmup < 1) warmup = 1;
  double t = static_cast<double>(step);
  double w = static_cast<double>(warmup);
  return peak * std::min(t / w, std::sqrt(w / t));
}

namespace {

constexpr char kMagic[8] = {'S', '2', 'S', 'T', 'C', 'K', 'P', '1'};

void write_u64(std::ofstream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_i64(std::ofstream& out, int64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint64_t read_u64(std::ifstream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
int64_t read_i64(std::ifstream& in) {
  int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void write_string(std::ofstream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in) {
  uint64_t n = read_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

void write_tensors(std::ofstream& out, const std::vector<std::pair<std::string, ad::Mat>>& ts) {
  write_u64(out, ts.size());
  for (const auto& [name, m] : ts) {
    write_string(out, name);
    write_i64(out, m.rows());
    write_i64(out, m.cols());
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
}

std::vector<std::pair<std::string, ad::Mat>> read_tensors(std::ifstream& in) {
  std::vector<std::pair<std::string, ad::Mat>> ts;
  uint64_t n = read_u64(in);
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = read_string(in);
    int64_t rows = read_i64(in);
    int64_t cols = read_i64(in);
    if (rows < 0 || cols < 0) throw DataError("checkpoint: negative tensor shape");
    ad::Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    ts.emplace_back(std::move(name), std::move(m));
  }
  return ts;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  write_string(out, kind);
  write_string(out, config.serialize());
  write_tensors(out, tensors);
  write_tensors(out, adam_m);
  write_tensors(out, adam_v);
  write_i64(out, adam_steps);
  write_i64(out, train_step);
  write_string(out, rng_state);
  if (!out) throw DataError("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path);
  Checkpoint ckpt;
  ckpt.kind = read_string(in);
  ckpt.config = kv::Document::parse(read_string(in));
  ckpt.tensors = read_tensors(in);
  ckpt.adam_m = read_tensors(in);
  ckpt.adam_v = read_tensors(in);
  ckpt.adam_steps = read_i64(in);
  ckpt.train_step = read_i64(in);
  ckpt.rng_state = read_string(in);
  if (!in) throw DataError("checkpoint truncated: " + path);
  return ckpt;
}

}  // namespace s2st::nn
