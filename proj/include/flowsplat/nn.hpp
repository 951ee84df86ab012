#pragma once

#include <span>
#include <string>
#include <vector>

#include "flowsplat/autodiff.hpp"
#include "flowsplat/rng.hpp"

namespace flowsplat {

enum class Activation { kTanh, kRelu };

struct MlpSpec {
  int input = 0;
  std::vector<int> hidden;
  int output = 0;
  Activation activation = Activation::kTanh;
  bool zero_init_last = false;

  void validate() const {
    require(input > 0 && output > 0, "MlpSpec: widths must be positive");
    require(!hidden.empty(), "MlpSpec: at least one hidden layer required");
    for (int h : hidden) require(h > 0, "MlpSpec: widths must be positive");
  }
};

namespace detail {

inline void xavier_init(std::span<double> w, int fan_in, int fan_out,
                        Rng& rng) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : w) v = rng.uniform(-limit, limit);
}

}  // namespace detail

/// Fully connected net with identity output activation. Parameters are
/// registered as "<prefix>.W<i>" / "<prefix>.b<i>" in layer order; biases
/// start at zero, weights Xavier-uniform from the supplied generator.
class Mlp {
 public:
  Mlp() = default;

  Mlp(ParamStore& store, std::string prefix, MlpSpec spec, Rng& rng)
      : prefix_(std::move(prefix)), spec_(std::move(spec)) {
    spec_.validate();
    std::vector<int> dims;
    dims.push_back(spec_.input);
    dims.insert(dims.end(), spec_.hidden.begin(), spec_.hidden.end());
    dims.push_back(spec_.output);
    n_layers_ = static_cast<int>(dims.size()) - 1;
    for (int l = 0; l < n_layers_; ++l) {
      int in = dims[l], out = dims[l + 1];
      store.add(wname(l), {static_cast<std::size_t>(out),
                           static_cast<std::size_t>(in)});
      store.add(bname(l), {static_cast<std::size_t>(out)});
      bool last = (l == n_layers_ - 1);
      if (!(last && spec_.zero_init_last))
        detail::xavier_init(store.values(wname(l)), in, out, rng);
    }
  }

  int build(Tape& tape, int input) const {
    int h = input;
    for (int l = 0; l < n_layers_; ++l) {
      h = tape.linear(wname(l), bname(l), h);
      if (l + 1 < n_layers_) h = activate(tape, h);
    }
    return h;
  }

  std::vector<double> forward_plain(const ParamStore& store,
                                    std::span<const double> in) const {
    require(static_cast<int>(in.size()) == spec_.input,
            "Mlp::forward_plain: input size mismatch");
    std::vector<double> x(in.begin(), in.end());
    std::vector<double> y;
    for (int l = 0; l < n_layers_; ++l) {
      auto w = store.values(wname(l));
      auto b = store.values(bname(l));
      std::size_t out = b.size();
      std::size_t cols = x.size();
      y.assign(out, 0.0);
      for (std::size_t r = 0; r < out; ++r) {
        double s = b[r];
        const double* wr = w.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
        y[r] = s;
      }
      if (l + 1 < n_layers_) {
        for (double& v : y)
          v = spec_.activation == Activation::kTanh
                  ? std::tanh(v)
                  : (v > 0.0 ? v : 0.0);
      }
      x.swap(y);
    }
    return x;
  }

  const MlpSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }
  int layer_count() const { return n_layers_; }

  std::string wname(int l) const {
    return prefix_ + ".W" + std::to_string(l);
  }
  std::string bname(int l) const {
    return prefix_ + ".b" + std::to_string(l);
  }

 private:
  std::string prefix_;
  MlpSpec spec_;
  int n_layers_ = 0;

  int activate(Tape& tape, int h) const {
    return spec_.activation == Activation::kTanh ? tape.tanh(h)
                                                 : tape.relu(h);
  }
};

/// Single affine map (no hidden layer); used where an MlpSpec would be
/// degenerate, e.g. the pattern-logit head.
class Linear {
 public:
  Linear() = default;

  Linear(ParamStore& store, std::string prefix, int in, int out, Rng& rng,
         bool zero_init = false)
      : prefix_(std::move(prefix)), in_(in), out_(out) {
    require(in > 0 && out > 0, "Linear: widths must be positive");
    store.add(wname(), {static_cast<std::size_t>(out),
                        static_cast<std::size_t>(in)});
    store.add(bname(), {static_cast<std::size_t>(out)});
    if (!zero_init) detail::xavier_init(store.values(wname()), in, out, rng);
  }

  int build(Tape& tape, int input) const {
    return tape.linear(wname(), bname(), input);
  }

  std::vector<double> forward_plain(const ParamStore& store,
                                    std::span<const double> in) const {
    require(static_cast<int>(in.size()) == in_,
            "Linear::forward_plain: input size mismatch");
    auto w = store.values(wname());
    auto b = store.values(bname());
    std::vector<double> y(out_);
    for (int r = 0; r < out_; ++r) {
      double s = b[r];
      const double* wr = w.data() + static_cast<std::size_t>(r) * in_;
      for (int c = 0; c < in_; ++c) s += wr[c] * in[c];
      y[r] = s;
    }
    return y;
  }

  std::string wname() const { return prefix_ + ".W"; }
  std::string bname() const { return prefix_ + ".b"; }
  int input_width() const { return in_; }
  int output_width() const { return out_; }

 private:
  std::string prefix_;
  int in_ = 0, out_ = 0;
};

}  // namespace flowsplat
