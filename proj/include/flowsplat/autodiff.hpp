#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "flowsplat/affine.hpp"
#include "flowsplat/error.hpp"
#include "flowsplat/math.hpp"

namespace flowsplat {

// ------------------------------------------------------------- ParamStore

/// Named parameter arrays in one flat buffer. Shapes are fixed at
/// registration; the flat layout is what the optimizer and checkpoint
/// formats operate on.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    std::vector<std::size_t> shape;
  };

  std::size_t add(const std::string& name, std::vector<std::size_t> shape) {
    require(!name.empty(), "ParamStore::add: empty name");
    require(!index_.count(name), "ParamStore::add: duplicate name");
    std::size_t size = 1;
    for (std::size_t d : shape) {
      require(d > 0, "ParamStore::add: zero dimension");
      size *= d;
    }
    Entry e{name, values_.size(), size, std::move(shape)};
    values_.resize(values_.size() + size, 0.0);
    index_.emplace(name, entries_.size());
    entries_.push_back(std::move(e));
    return entries_.size() - 1;
  }

  bool has(std::string_view name) const {
    return index_.count(std::string(name)) > 0;
  }

  std::size_t entry_index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    require(it != index_.end(), "ParamStore: unknown parameter name");
    return it->second;
  }

  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  const Entry& entry(std::string_view name) const {
    return entries_[entry_index(name)];
  }
  std::size_t entry_count() const { return entries_.size(); }

  std::span<double> values(std::string_view name) {
    const Entry& e = entry(name);
    return {values_.data() + e.offset, e.size};
  }
  std::span<const double> values(std::string_view name) const {
    const Entry& e = entry(name);
    return {values_.data() + e.offset, e.size};
  }

  std::size_t size() const { return values_.size(); }
  std::vector<double>& raw() { return values_; }
  const std::vector<double>& raw() const { return values_; }

 private:
  std::vector<double> values_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ------------------------------------------------------------------ Tape

/// Reverse-mode tape over vector-valued nodes. Values are computed
/// eagerly as nodes are recorded; backward() walks the record in exact
/// reverse order. Parameter leaves snapshot store values at record time,
/// and parameter gradients accumulate into a store-aligned flat buffer.
///
/// The store must not be mutated between recording and backward().
class Tape {
 public:
  enum class Op {
    kConst, kParam, kAdd, kSub, kMul, kAxpy, kScale,
    kLinear, kVecMat,
    kTanh, kRelu, kExp, kSin, kCos, kSoftmax,
    kConcat, kSlice, kSum, kSumSq, kNormalize, kPosEnc,
    kQuatMul, kQuatExpOmega, kQuatLogNorm2,
    kAffineVelocity, kAffineJacApply,
  };

  explicit Tape(const ParamStore& store) : store_(&store) {}

  void reset() {
    nodes_.clear();
    vals_.clear();
    aux_.clear();
    param_nodes_.clear();
    ran_backward_ = false;
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

  int size(int id) const { return at(id).size; }

  std::span<const double> value(int id) const {
    const Node& n = at(id);
    return {vals_.data() + n.val, static_cast<std::size_t>(n.size)};
  }

  double scalar(int id) const {
    const Node& n = at(id);
    require(n.size == 1, "Tape::scalar: node is not scalar");
    return vals_[n.val];
  }

  Vec3 value_vec3(int id) const {
    auto v = value(id);
    require(v.size() == 3, "Tape::value_vec3: node is not 3-dim");
    return {v[0], v[1], v[2]};
  }

  // --- leaves ---

  int constant(std::span<const double> v) {
    int id = push(Op::kConst, -1, -1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), vals_.begin() + nodes_[id].val);
    return id;
  }

  int constant(std::initializer_list<double> v) {
    return constant(std::span<const double>(v.begin(), v.size()));
  }

  int constant_scalar(double v) { return constant({v}); }

  int constant_vec3(const Vec3& v) { return constant({v.x, v.y, v.z}); }

  /// Leaf for a named parameter array. Repeated requests on one tape share
  /// a single node; the store must stay unchanged for the tape's lifetime,
  /// so the dedup is observationally equivalent and keeps big training
  /// graphs from copying the same weights once per use.
  int param(std::string_view name) {
    std::size_t idx = store_->entry_index(name);
    auto it = param_nodes_.find(idx);
    if (it != param_nodes_.end()) return it->second;
    const ParamStore::Entry& e = store_->entry(name);
    int id = push(Op::kParam, -1, -1, static_cast<int>(e.size));
    nodes_[id].aux = static_cast<int>(idx);
    auto src = store_->values(name);
    std::copy(src.begin(), src.end(), vals_.begin() + nodes_[id].val);
    param_nodes_.emplace(idx, id);
    return id;
  }

  // --- elementwise / linear algebra ---

  int add(int a, int b) { return binary(Op::kAdd, a, b); }
  int sub(int a, int b) { return binary(Op::kSub, a, b); }
  int mul(int a, int b) { return binary(Op::kMul, a, b); }

  /// a + c*b.
  int axpy(int a, int b, double c) {
    int id = binary(Op::kAxpy, a, b);
    nodes_[id].c = c;
    recompute_axpy(id);
    return id;
  }

  int scale(int a, double c) {
    int id = push(Op::kScale, a, -1, at(a).size);
    nodes_[id].c = c;
    auto x = value(a);
    double* y = out(id);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = c * x[i];
    return id;
  }

  /// W x + b for parameter entries W (out x in, row-major) and b (out).
  int linear(std::string_view w_name, std::string_view b_name, int x) {
    const ParamStore::Entry& we = store_->entry(w_name);
    const ParamStore::Entry& be = store_->entry(b_name);
    require(we.shape.size() == 2, "Tape::linear: W must be 2-d");
    int rows = static_cast<int>(we.shape[0]);
    int cols = static_cast<int>(we.shape[1]);
    require(be.size == static_cast<std::size_t>(rows),
            "Tape::linear: bias size mismatch");
    require(at(x).size == cols, "Tape::linear: input size mismatch");
    int id = push(Op::kLinear, x, -1, rows);
    nodes_[id].aux = push_aux({static_cast<int>(store_->entry_index(w_name)),
                               static_cast<int>(store_->entry_index(b_name)),
                               rows, cols});
    const double* w = store_->raw().data() + we.offset;
    const double* b = store_->raw().data() + be.offset;
    auto xv = value(x);
    double* y = out(id);
    for (int r = 0; r < rows; ++r) {
      double s = b[r];
      const double* wr = w + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) s += wr[c] * xv[c];
      y[r] = s;
    }
    return id;
  }

  /// a^T M for a of length `rows` and node m holding a row-major
  /// rows x cols matrix; result has length `cols`.
  int vecmat(int a, int m, int rows, int cols) {
    require(at(a).size == rows, "Tape::vecmat: vector size mismatch");
    require(at(m).size == rows * cols, "Tape::vecmat: matrix size mismatch");
    int id = push(Op::kVecMat, a, m, cols);
    nodes_[id].aux = push_aux({rows, cols});
    auto av = value(a);
    auto mv = value(m);
    double* y = out(id);
    for (int c = 0; c < cols; ++c) y[c] = 0.0;
    for (int r = 0; r < rows; ++r) {
      double ar = av[r];
      const double* mr = mv.data() + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) y[c] += ar * mr[c];
    }
    return id;
  }

  // --- nonlinearities ---

  int tanh(int a) { return unary(Op::kTanh, a, [](double v) { return std::tanh(v); }); }
  int relu(int a) { return unary(Op::kRelu, a, [](double v) { return v > 0.0 ? v : 0.0; }); }
  int exp(int a) { return unary(Op::kExp, a, [](double v) { return std::exp(v); }); }
  int sin(int a) { return unary(Op::kSin, a, [](double v) { return std::sin(v); }); }
  int cos(int a) { return unary(Op::kCos, a, [](double v) { return std::cos(v); }); }

  int softmax(int a) {
    int id = push(Op::kSoftmax, a, -1, at(a).size);
    auto x = value(a);
    double* y = out(id);
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      y[i] = std::exp(x[i] - mx);
      total += y[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) y[i] /= total;
    return id;
  }

  // --- structure ---

  int concat(std::span<const int> parts) {
    require(!parts.empty(), "Tape::concat: no inputs");
    int total = 0;
    for (int p : parts) total += at(p).size;
    int id = push(Op::kConcat, -1, -1, total);
    std::vector<int> aux(parts.begin(), parts.end());
    nodes_[id].aux = push_aux(aux);
    nodes_[id].aux_n = static_cast<int>(parts.size());
    double* y = out(id);
    for (int p : parts) {
      auto v = value(p);
      y = std::copy(v.begin(), v.end(), y);
    }
    return id;
  }

  int concat(std::initializer_list<int> parts) {
    return concat(std::span<const int>(parts.begin(), parts.size()));
  }

  int slice(int a, int offset, int len) {
    require(offset >= 0 && len >= 1 && offset + len <= at(a).size,
            "Tape::slice: range out of bounds");
    int id = push(Op::kSlice, a, -1, len);
    nodes_[id].aux = push_aux({offset});
    auto x = value(a);
    std::copy(x.begin() + offset, x.begin() + offset + len, out(id));
    return id;
  }

  int sum(int a) {
    int id = push(Op::kSum, a, -1, 1);
    double s = 0.0;
    for (double v : value(a)) s += v;
    *out(id) = s;
    return id;
  }

  int sum_sq(int a) {
    int id = push(Op::kSumSq, a, -1, 1);
    double s = 0.0;
    for (double v : value(a)) s += v * v;
    *out(id) = s;
    return id;
  }

  int normalize(int a) {
    int id = push(Op::kNormalize, a, -1, at(a).size);
    auto x = value(a);
    double n = 0.0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    require(n > 0.0, "Tape::normalize: zero vector");
    nodes_[id].c = n;
    double* y = out(id);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / n;
    return id;
  }

  /// [x, sin(2^k pi x_c), cos(2^k pi x_c) ...] per component, k = 0..freqs-1.
  /// Layout matches positional encoding helpers: raw input first, then the
  /// per-component frequency ladder.
  int pos_enc(int a, int freqs) {
    require(freqs >= 1, "Tape::pos_enc: freqs must be positive");
    int d = at(a).size;
    int id = push(Op::kPosEnc, a, -1, d + 2 * freqs * d);
    nodes_[id].aux = push_aux({freqs});
    auto x = value(a);
    double* y = out(id);
    for (int i = 0; i < d; ++i) y[i] = x[i];
    int at_i = d;
    for (int i = 0; i < d; ++i) {
      for (int k = 0; k < freqs; ++k) {
        double arg = std::ldexp(kPi * x[i], k);
        y[at_i++] = std::sin(arg);
        y[at_i++] = std::cos(arg);
      }
    }
    return id;
  }

  // --- quaternions (scalar-first layout, 4 components) ---

  int quat_mul(int a, int b) {
    require(at(a).size == 4 && at(b).size == 4,
            "Tape::quat_mul: inputs must be quaternions");
    int id = push(Op::kQuatMul, a, b, 4);
    auto p = value(a);
    auto q = value(b);
    double* y = out(id);
    y[0] = p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3];
    y[1] = p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2];
    y[2] = p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1];
    y[3] = p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0];
    return id;
  }

  /// exp of the pure quaternion (0, c*omega) as a 4-vector.
  int quat_exp_omega(int omega, double c) {
    require(at(omega).size == 3, "Tape::quat_exp_omega: omega must be 3-dim");
    int id = push(Op::kQuatExpOmega, omega, -1, 4);
    nodes_[id].c = c;
    Vec3 u = value_vec3(omega) * c;
    Quaternion q = Quaternion::exp_pure(u);
    double* y = out(id);
    y[0] = q.w; y[1] = q.x; y[2] = q.y; y[3] = q.z;
    return id;
  }

  /// Squared half-angle of a unit quaternion: phi^2, phi = atan2(|vec|, w).
  int quat_log_norm2(int q) {
    require(at(q).size == 4, "Tape::quat_log_norm2: input must be quaternion");
    int id = push(Op::kQuatLogNorm2, q, -1, 1);
    auto v = value(q);
    double m = std::sqrt(v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
    double phi = std::atan2(m, v[0]);
    *out(id) = phi * phi;
    return id;
  }

  // --- affine velocity field ---

  /// v = Phi(x) w for position node x (3) and weight node w (12).
  int affine_velocity(int x, int w) {
    require(at(x).size == 3 && at(w).size == 12,
            "Tape::affine_velocity: bad input sizes");
    int id = push(Op::kAffineVelocity, x, w, 3);
    Vec3 v = velocity(value_vec3(x), weights_of(w));
    double* y = out(id);
    y[0] = v.x; y[1] = v.y; y[2] = v.z;
    return id;
  }

  /// A(w) u for weight node w (12) and vector node u (3); the convective
  /// term is affine_jac_apply(w, affine_velocity(x, w)).
  int affine_jac_apply(int w, int u) {
    require(at(w).size == 12 && at(u).size == 3,
            "Tape::affine_jac_apply: bad input sizes");
    int id = push(Op::kAffineJacApply, w, u, 3);
    Vec3 r = assemble(weights_of(w)).a * value_vec3(u);
    double* y = out(id);
    y[0] = r.x; y[1] = r.y; y[2] = r.z;
    return id;
  }

  // --- backward ---

  /// Reverse sweep seeding d(output)/d(output) = seed. Parameter
  /// gradients accumulate across calls until reset()/zero_grads().
  void backward(int output, std::span<const double> seed) {
    require(output >= 0 && output < node_count(), "Tape::backward: bad node");
    require(static_cast<int>(seed.size()) == at(output).size,
            "Tape::backward: seed size mismatch");
    grads_.assign(vals_.size(), 0.0);
    if (pgrads_.size() != store_->size()) pgrads_.assign(store_->size(), 0.0);
    std::copy(seed.begin(), seed.end(), grads_.begin() + at(output).val);
    for (int id = output; id >= 0; --id) backward_node(id);
    ran_backward_ = true;
  }

  void backward(int output) {
    require(at(output).size == 1,
            "Tape::backward: scalar seed needs scalar output");
    double one = 1.0;
    backward(output, {&one, 1});
  }

  bool ran_backward() const { return ran_backward_; }

  std::span<const double> param_grads() const {
    require(ran_backward_, "Tape::param_grads: backward not run");
    return pgrads_;
  }

  void zero_grads() {
    pgrads_.assign(store_->size(), 0.0);
    ran_backward_ = false;
  }

  /// Gradient w.r.t. a non-parameter node from the last backward sweep.
  std::span<const double> grad(int id) const {
    require(ran_backward_, "Tape::grad: backward not run");
    const Node& n = at(id);
    return {grads_.data() + n.val, static_cast<std::size_t>(n.size)};
  }

 private:
  struct Node {
    Op op;
    int a = -1, b = -1;
    int val = 0;
    int size = 0;
    double c = 0.0;
    int aux = -1;
    int aux_n = 0;
  };

  const ParamStore* store_;
  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> grads_;
  std::vector<double> pgrads_;
  std::vector<int> aux_;
  std::unordered_map<std::size_t, int> param_nodes_;
  bool ran_backward_ = false;

  const Node& at(int id) const {
    require(id >= 0 && id < node_count(), "Tape: node id out of range");
    return nodes_[id];
  }

  double* out(int id) { return vals_.data() + nodes_[id].val; }

  int push(Op op, int a, int b, int size) {
    require(size >= 1, "Tape: node size must be >= 1");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.size = size;
    n.val = static_cast<int>(vals_.size());
    vals_.resize(vals_.size() + size, 0.0);
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  int push_aux(const std::vector<int>& v) {
    int off = static_cast<int>(aux_.size());
    aux_.insert(aux_.end(), v.begin(), v.end());
    return off;
  }

  int binary(Op op, int a, int b) {
    require(at(a).size == at(b).size, "Tape: operand size mismatch");
    int id = push(op, a, b, at(a).size);
    auto x = value(a);
    auto y = value(b);
    double* z = out(id);
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + y[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] - y[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] * y[i];
        break;
      default:
        break;  // kAxpy fills after c is set
    }
    return id;
  }

  void recompute_axpy(int id) {
    const Node& n = nodes_[id];
    auto x = value(n.a);
    auto y = value(n.b);
    double* z = out(id);
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + n.c * y[i];
  }

  template <class F>
  int unary(Op op, int a, F f) {
    int id = push(op, a, -1, at(a).size);
    auto x = value(a);
    double* y = out(id);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return id;
  }

  AffineWeights weights_of(int id) const {
    auto v = value(id);
    AffineWeights w;
    std::copy(v.begin(), v.end(), w.begin());
    return w;
  }

  double* gslot(int id) { return grads_.data() + nodes_[id].val; }

  void backward_node(int id) {
    const Node& n = nodes_[id];
    const double* g = grads_.data() + n.val;
    bool any = false;
    for (int i = 0; i < n.size; ++i)
      if (g[i] != 0.0) { any = true; break; }
    if (!any) return;

    switch (n.op) {
      case Op::kConst:
        break;
      case Op::kParam: {
        const auto& e = store_->entry(static_cast<std::size_t>(n.aux));
        for (int i = 0; i < n.size; ++i) pgrads_[e.offset + i] += g[i];
        break;
      }
      case Op::kAdd: {
        double* ga = gslot(n.a);
        double* gb = gslot(n.b);
        for (int i = 0; i < n.size; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        double* ga = gslot(n.a);
        double* gb = gslot(n.b);
        for (int i = 0; i < n.size; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        auto xa = value(n.a);
        auto xb = value(n.b);
        double* ga = gslot(n.a);
        double* gb = gslot(n.b);
        for (int i = 0; i < n.size; ++i) {
          ga[i] += xb[i] * g[i];
          gb[i] += xa[i] * g[i];
        }
        break;
      }
      case Op::kAxpy: {
        double* ga = gslot(n.a);
        double* gb = gslot(n.b);
        for (int i = 0; i < n.size; ++i) {
          ga[i] += g[i];
          gb[i] += n.c * g[i];
        }
        break;
      }
      case Op::kScale: {
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i) ga[i] += n.c * g[i];
        break;
      }
      case Op::kLinear: {
        int we_idx = aux_[n.aux], be_idx = aux_[n.aux + 1];
        int rows = aux_[n.aux + 2], cols = aux_[n.aux + 3];
        const auto& we = store_->entry(static_cast<std::size_t>(we_idx));
        const auto& be = store_->entry(static_cast<std::size_t>(be_idx));
        const double* w = store_->raw().data() + we.offset;
        auto x = value(n.a);
        double* gx = gslot(n.a);
        double* gw = pgrads_.data() + we.offset;
        double* gb = pgrads_.data() + be.offset;
        for (int r = 0; r < rows; ++r) {
          double gr = g[r];
          if (gr == 0.0) continue;
          const double* wr = w + static_cast<std::size_t>(r) * cols;
          double* gwr = gw + static_cast<std::size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) {
            gx[c] += wr[c] * gr;
            gwr[c] += x[c] * gr;
          }
          gb[r] += gr;
        }
        break;
      }
      case Op::kVecMat: {
        int rows = aux_[n.aux], cols = aux_[n.aux + 1];
        auto a = value(n.a);
        auto m = value(n.b);
        double* ga = gslot(n.a);
        double* gm = gslot(n.b);
        for (int r = 0; r < rows; ++r) {
          const double* mr = m.data() + static_cast<std::size_t>(r) * cols;
          double* gmr = gm + static_cast<std::size_t>(r) * cols;
          double acc = 0.0;
          double ar = a[r];
          for (int c = 0; c < cols; ++c) {
            acc += mr[c] * g[c];
            gmr[c] += ar * g[c];
          }
          ga[r] += acc;
        }
        break;
      }
      case Op::kTanh: {
        const double* y = vals_.data() + n.val;
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i) ga[i] += (1.0 - y[i] * y[i]) * g[i];
        break;
      }
      case Op::kRelu: {
        auto x = value(n.a);
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i)
          if (x[i] > 0.0) ga[i] += g[i];
        break;
      }
      case Op::kExp: {
        const double* y = vals_.data() + n.val;
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i) ga[i] += y[i] * g[i];
        break;
      }
      case Op::kSin: {
        auto x = value(n.a);
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i) ga[i] += std::cos(x[i]) * g[i];
        break;
      }
      case Op::kCos: {
        auto x = value(n.a);
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i) ga[i] -= std::sin(x[i]) * g[i];
        break;
      }
      case Op::kSoftmax: {
        const double* y = vals_.data() + n.val;
        double* ga = gslot(n.a);
        double dy = 0.0;
        for (int i = 0; i < n.size; ++i) dy += y[i] * g[i];
        for (int i = 0; i < n.size; ++i) ga[i] += y[i] * (g[i] - dy);
        break;
      }
      case Op::kConcat: {
        int pos = 0;
        for (int k = 0; k < n.aux_n; ++k) {
          int part = aux_[n.aux + k];
          double* gp = gslot(part);
          int sz = nodes_[part].size;
          for (int i = 0; i < sz; ++i) gp[i] += g[pos + i];
          pos += sz;
        }
        break;
      }
      case Op::kSlice: {
        int off = aux_[n.aux];
        double* ga = gslot(n.a);
        for (int i = 0; i < n.size; ++i) ga[off + i] += g[i];
        break;
      }
      case Op::kSum: {
        double* ga = gslot(n.a);
        int sz = nodes_[n.a].size;
        for (int i = 0; i < sz; ++i) ga[i] += g[0];
        break;
      }
      case Op::kSumSq: {
        auto x = value(n.a);
        double* ga = gslot(n.a);
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * x[i] * g[0];
        break;
      }
      case Op::kNormalize: {
        const double* y = vals_.data() + n.val;
        double* ga = gslot(n.a);
        double yg = 0.0;
        for (int i = 0; i < n.size; ++i) yg += y[i] * g[i];
        for (int i = 0; i < n.size; ++i)
          ga[i] += (g[i] - y[i] * yg) / n.c;
        break;
      }
      case Op::kPosEnc: {
        int freqs = aux_[n.aux];
        auto x = value(n.a);
        double* ga = gslot(n.a);
        int d = static_cast<int>(x.size());
        int at_i = d;
        for (int i = 0; i < d; ++i) {
          double acc = g[i];
          for (int k = 0; k < freqs; ++k) {
            double w = std::ldexp(kPi, k);
            double arg = w * x[i];
            acc += w * (std::cos(arg) * g[at_i] - std::sin(arg) * g[at_i + 1]);
            at_i += 2;
          }
          ga[i] += acc;
        }
        break;
      }
      case Op::kQuatMul: {
        auto p = value(n.a);
        auto q = value(n.b);
        double* gp = gslot(n.a);
        double* gq = gslot(n.b);
        gp[0] += g[0] * q[0] + g[1] * q[1] + g[2] * q[2] + g[3] * q[3];
        gp[1] += -g[0] * q[1] + g[1] * q[0] - g[2] * q[3] + g[3] * q[2];
        gp[2] += -g[0] * q[2] + g[1] * q[3] + g[2] * q[0] - g[3] * q[1];
        gp[3] += -g[0] * q[3] - g[1] * q[2] + g[2] * q[1] + g[3] * q[0];
        gq[0] += g[0] * p[0] + g[1] * p[1] + g[2] * p[2] + g[3] * p[3];
        gq[1] += -g[0] * p[1] + g[1] * p[0] + g[2] * p[3] - g[3] * p[2];
        gq[2] += -g[0] * p[2] - g[1] * p[3] + g[2] * p[0] + g[3] * p[1];
        gq[3] += -g[0] * p[3] + g[1] * p[2] - g[2] * p[1] + g[3] * p[0];
        break;
      }
      case Op::kQuatExpOmega: {
        Vec3 omega = {value(n.a)[0], value(n.a)[1], value(n.a)[2]};
        Vec3 u = omega * n.c;
        double theta = norm(u);
        Vec3 gu;
        Vec3 gv = {g[1], g[2], g[3]};
        if (theta < 1e-8) {
          // y ~ (1 - theta^2/2, u); dvec/du ~ I, dw/du ~ -u.
          gu = gv - u * g[0];
        } else {
          double s = std::sin(theta) / theta;
          double sp = (std::cos(theta) - s) / theta;  // ds/dtheta
          Vec3 uhat = u / theta;
          gu = gv * s + uhat * (sp * dot(gv, u) - g[0] * std::sin(theta));
        }
        double* ga = gslot(n.a);
        ga[0] += n.c * gu.x;
        ga[1] += n.c * gu.y;
        ga[2] += n.c * gu.z;
        break;
      }
      case Op::kQuatLogNorm2: {
        auto q = value(n.a);
        double m = std::sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        double r2 = m * m + q[0] * q[0];
        double phi = std::atan2(m, q[0]);
        double* ga = gslot(n.a);
        ga[0] += g[0] * 2.0 * phi * (-m / r2);
        double vcoef =
            (m < 1e-12) ? 2.0 / r2 : 2.0 * phi * q[0] / (r2 * m);
        ga[1] += g[0] * vcoef * q[1];
        ga[2] += g[0] * vcoef * q[2];
        ga[3] += g[0] * vcoef * q[3];
        break;
      }
      case Op::kAffineVelocity: {
        Vec3 x = {value(n.a)[0], value(n.a)[1], value(n.a)[2]};
        AffineWeights w = weights_of(n.b);
        Vec3 gradv = {g[0], g[1], g[2]};
        Mat3 a = assemble(w).a;
        Vec3 gx = a.transposed() * gradv;
        double* gxa = gslot(n.a);
        gxa[0] += gx.x;
        gxa[1] += gx.y;
        gxa[2] += gx.z;
        double* gw = gslot(n.b);
        for (int j = 0; j < 12; ++j) gw[j] += dot(basis_column(x, j), gradv);
        break;
      }
      case Op::kAffineJacApply: {
        AffineWeights w = weights_of(n.a);
        Vec3 u = {value(n.b)[0], value(n.b)[1], value(n.b)[2]};
        Vec3 gradv = {g[0], g[1], g[2]};
        double* gw = gslot(n.a);
        // A(w) u = Phi_linear(u) w; translation columns do not enter.
        for (int j = 3; j < 12; ++j) gw[j] += dot(basis_column(u, j), gradv);
        Vec3 gu = assemble(w).a.transposed() * gradv;
        double* gub = gslot(n.b);
        gub[0] += gu.x;
        gub[1] += gu.y;
        gub[2] += gu.z;
        break;
      }
    }
  }
};

// ------------------------------------------------------------------ Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Standard bias-corrected Adam over the flat parameter buffer.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, std::span<const double> grads) {
    require(params.size() == m_.size() && grads.size() == m_.size(),
            "Adam::step: size mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      double gi = grads[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gi;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gi * gi;
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  const AdamConfig& config() const { return cfg_; }

  /// For external schedules; takes effect from the next step() on.
  void set_lr(double lr) {
    require(std::isfinite(lr) && lr > 0.0, "Adam::set_lr: bad learning rate");
    cfg_.lr = lr;
  }

  const std::vector<double>& m() const { return m_; }
  const std::vector<double>& v() const { return v_; }
  long long t() const { return t_; }

  void restore(std::vector<double> m, std::vector<double> v, long long t) {
    require(m.size() == m_.size() && v.size() == v_.size(),
            "Adam::restore: size mismatch");
    require(t >= 0, "Adam::restore: negative step count");
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long long t_ = 0;
};

}  // namespace flowsplat
