#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fhvae/error.hpp"
#include "fhvae/mat.hpp"
#include "fhvae/rng.hpp"

namespace fhvae::net {

enum class ParamKind : std::uint8_t { weight, bias, table };

// Named flat collection of trainable arrays. Gradient and optimizer-moment
// stores mirror it index-for-index via zeros_like().
template <class T>
class ParamStore {
 public:
  int add(std::string name, std::size_t rows, std::size_t cols, ParamKind kind) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    int id = static_cast<int>(names_.size());
    index_.emplace(name, id);
    names_.push_back(std::move(name));
    kinds_.push_back(kind);
    arrays_.emplace_back(rows, cols);
    return id;
  }

  int find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? -1 : it->second;
  }

  std::size_t size() const { return arrays_.size(); }
  Mat<T>& operator[](std::size_t i) { return arrays_[i]; }
  const Mat<T>& operator[](std::size_t i) const { return arrays_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  ParamKind kind(std::size_t i) const { return kinds_[i]; }

  ParamStore zeros_like() const {
    ParamStore out;
    out.names_ = names_;
    out.kinds_ = kinds_;
    out.index_ = index_;
    out.arrays_.reserve(arrays_.size());
    for (const auto& a : arrays_) out.arrays_.emplace_back(a.rows(), a.cols());
    return out;
  }

  void zero_all() {
    for (auto& a : arrays_) a.zero();
  }

  bool all_finite() const {
    for (const auto& a : arrays_)
      if (!a.all_finite()) return false;
    return true;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays_) n += a.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < arrays_.size(); ++i) {
      int id = out.add(names_[i], arrays_[i].rows(), arrays_[i].cols(), kinds_[i]);
      out[id] = arrays_[i].template cast<U>();
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<ParamKind> kinds_;
  std::vector<Mat<T>> arrays_;
  std::unordered_map<std::string, int> index_;
};

// Index handles into a ParamStore. Gate blocks inside wx/wh/b are packed
// [input; forget; output; candidate], each of height `hidden`.
struct LstmRef {
  int wx = -1, wh = -1, b = -1;
  int input = 0, hidden = 0;
};

struct AffineRef {
  int w = -1, b = -1;
  int in = 0, out = 0;
};

template <class T>
LstmRef add_lstm(ParamStore<T>& store, const std::string& prefix, int input, int hidden) {
  LstmRef r;
  r.input = input;
  r.hidden = hidden;
  r.wx = store.add(prefix + ".wx", 4 * hidden, input, ParamKind::weight);
  r.wh = store.add(prefix + ".wh", 4 * hidden, hidden, ParamKind::weight);
  r.b = store.add(prefix + ".b", 1, 4 * hidden, ParamKind::bias);
  return r;
}

template <class T>
AffineRef add_affine(ParamStore<T>& store, const std::string& prefix, int in, int out) {
  AffineRef r;
  r.in = in;
  r.out = out;
  r.w = store.add(prefix + ".w", out, in, ParamKind::weight);
  r.b = store.add(prefix + ".b", 1, out, ParamKind::bias);
  return r;
}

// Xavier-uniform [-s, s] with s = sqrt(6 / (fan_in + fan_out)) on weights,
// fan_in = cols and fan_out = rows of the stored array; biases and mu tables
// start at zero. Each array draws from a stream keyed by its name, so the
// result does not depend on registration order.
template <class T>
void xavier_init(ParamStore<T>& store, std::uint64_t seed) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    Mat<T>& a = store[i];
    if (store.kind(i) != ParamKind::weight) {
      a.zero();
      continue;
    }
    double s = std::sqrt(6.0 / static_cast<double>(a.rows() + a.cols()));
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the name
    for (char c : store.name(i)) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    Rng rng(seed, stream::kParamInit, h);
    for (std::size_t j = 0; j < a.size(); ++j)
      a.data()[j] = static_cast<T>((2.0 * rng.uniform() - 1.0) * s);
  }
}

namespace detail {
template <class T>
inline T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}
}  // namespace detail

// ---- single-vector ops ----

template <class T>
void lstm_step(const ParamStore<T>& p, const LstmRef& r, std::span<const T> x,
               std::span<const T> h_prev, std::span<const T> c_prev, std::span<T> h_out,
               std::span<T> c_out) {
  const int H = r.hidden;
  require_dim(static_cast<int>(x.size()) == r.input, "lstm_step: input size");
  require_dim(static_cast<int>(h_prev.size()) == H && static_cast<int>(c_prev.size()) == H,
              "lstm_step: state size");
  require_dim(static_cast<int>(h_out.size()) == H && static_cast<int>(c_out.size()) == H,
              "lstm_step: output size");
  const Mat<T>& wx = p[r.wx];
  const Mat<T>& wh = p[r.wh];
  const Mat<T>& b = p[r.b];
  std::vector<T> g(4 * H);
  for (int j = 0; j < 4 * H; ++j)
    g[j] = kern::dot(wx.row(j), x.data(), x.size()) +
           kern::dot(wh.row(j), h_prev.data(), h_prev.size()) + b.at(0, j);
  for (int j = 0; j < H; ++j) {
    T i_g = detail::sigmoid(g[j]);
    T f_g = detail::sigmoid(g[H + j]);
    T o_g = detail::sigmoid(g[2 * H + j]);
    T c_g = std::tanh(g[3 * H + j]);
    T c = f_g * c_prev[j] + i_g * c_g;
    c_out[j] = c;
    h_out[j] = o_g * std::tanh(c);
  }
}

template <class T>
struct StackOutput {
  Mat<T> top;                 // T x H, per-step hidden states of the top layer
  std::vector<T> last_concat; // concatenated last-step hidden states of all layers
};

template <class T>
StackOutput<T> stacked_forward(const ParamStore<T>& p, const std::vector<LstmRef>& layers,
                               const Mat<T>& x) {
  require_dim(x.rows() >= 1, "stacked_forward: empty sequence");
  require_dim(!layers.empty() && static_cast<int>(x.cols()) == layers.front().input,
              "stacked_forward: input width");
  const std::size_t steps = x.rows();
  Mat<T> cur = x;
  StackOutput<T> out;
  for (const LstmRef& r : layers) {
    const int H = r.hidden;
    Mat<T> next(steps, H);
    std::vector<T> h(H, T(0)), c(H, T(0)), h2(H), c2(H);
    for (std::size_t t = 0; t < steps; ++t) {
      lstm_step<T>(p, r, cur.row_span(t), h, c, std::span<T>(h2), std::span<T>(c2));
      std::swap(h, h2);
      std::swap(c, c2);
      for (int j = 0; j < H; ++j) next.at(t, j) = h[j];
    }
    out.last_concat.insert(out.last_concat.end(), h.begin(), h.end());
    cur = std::move(next);
  }
  out.top = std::move(cur);
  return out;
}

template <class T>
std::vector<T> affine(const ParamStore<T>& p, const AffineRef& r, std::span<const T> v) {
  require_dim(static_cast<int>(v.size()) == r.in, "affine: input size");
  const Mat<T>& w = p[r.w];
  const Mat<T>& b = p[r.b];
  std::vector<T> out(r.out);
  for (int j = 0; j < r.out; ++j) out[j] = kern::dot(w.row(j), v.data(), v.size()) + b.at(0, j);
  return out;
}

// ---- batched forward/backward over a minibatch ----

// Forward state of one stacked LSTM for one minibatch, kept for backward.
// ifog holds post-activation gates; column blocks [i f o g] of width H.
template <class T>
struct StackCache {
  std::vector<const Mat<T>*> inputs;          // steps pointers, each B x D
  std::vector<std::vector<Mat<T>>> ifog;      // [layer][t] B x 4H
  std::vector<std::vector<Mat<T>>> cell;      // [layer][t] B x H
  std::vector<std::vector<Mat<T>>> hidden;    // [layer][t] B x H
  std::size_t batch = 0, steps = 0;
};

template <class T>
void stack_forward(const ParamStore<T>& p, const std::vector<LstmRef>& layers,
                   std::span<const Mat<T>* const> inputs, StackCache<T>& cache) {
  require_dim(!inputs.empty(), "stack_forward: empty sequence");
  const std::size_t steps = inputs.size();
  const std::size_t B = inputs[0]->rows();
  cache.inputs.assign(inputs.begin(), inputs.end());
  cache.batch = B;
  cache.steps = steps;
  const std::size_t L = layers.size();
  cache.ifog.assign(L, {});
  cache.cell.assign(L, {});
  cache.hidden.assign(L, {});
  for (std::size_t li = 0; li < L; ++li) {
    const LstmRef& r = layers[li];
    const int H = r.hidden;
    const Mat<T>& wx = p[r.wx];
    const Mat<T>& wh = p[r.wh];
    const Mat<T>& b = p[r.b];
    auto& ifog = cache.ifog[li];
    auto& cell = cache.cell[li];
    auto& hidden = cache.hidden[li];
    ifog.reserve(steps);
    cell.reserve(steps);
    hidden.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      const Mat<T>& x_t = li == 0 ? *cache.inputs[t] : cache.hidden[li - 1][t];
      require_dim(static_cast<int>(x_t.cols()) == r.input, "stack_forward: layer input width");
      Mat<T> g(B, 4 * H);
      matmul_nt(x_t, wx, g);
      if (t > 0) matmul_nt(hidden[t - 1], wh, g);
      add_row_inplace(g, b.row_span(0));
      Mat<T> c(B, H), h(B, H);
      const Mat<T>* c_prev = t > 0 ? &cell[t - 1] : nullptr;
      for (std::size_t bi = 0; bi < B; ++bi) {
        T* gr = g.row(bi);
        T* cr = c.row(bi);
        T* hr = h.row(bi);
        const T* cp = c_prev != nullptr ? c_prev->row(bi) : nullptr;
        for (int j = 0; j < H; ++j) {
          T i_g = detail::sigmoid(gr[j]);
          T f_g = detail::sigmoid(gr[H + j]);
          T o_g = detail::sigmoid(gr[2 * H + j]);
          T c_g = std::tanh(gr[3 * H + j]);
          gr[j] = i_g;
          gr[H + j] = f_g;
          gr[2 * H + j] = o_g;
          gr[3 * H + j] = c_g;
          T cv = i_g * c_g + (cp != nullptr ? f_g * cp[j] : T(0));
          cr[j] = cv;
          hr[j] = o_g * std::tanh(cv);
        }
      }
      ifog.push_back(std::move(g));
      cell.push_back(std::move(c));
      hidden.push_back(std::move(h));
    }
  }
}

// Gathers the concatenated last-step hidden states of all layers (B x sum H).
template <class T>
Mat<T> last_step_concat(const StackCache<T>& cache) {
  std::size_t total = 0;
  for (const auto& layer : cache.hidden) total += layer.back().cols();
  Mat<T> out(cache.batch, total);
  std::size_t off = 0;
  for (const auto& layer : cache.hidden) {
    const Mat<T>& h = layer.back();
    for (std::size_t bi = 0; bi < cache.batch; ++bi)
      for (std::size_t j = 0; j < h.cols(); ++j) out.at(bi, off + j) = h.at(bi, j);
    off += h.cols();
  }
  return out;
}

// Backward through the stack.
//   d_top:         optional per-step gradients on the top layer hidden states
//   d_last_concat: optional gradient on last_step_concat()
//   dx_accum:      if non-null, accumulates sum over steps of the gradient on
//                  the layer-0 inputs (B x D); used where the same vector is
//                  fed at every step or only a summed gradient is needed.
template <class T>
void stack_backward(const ParamStore<T>& p, const std::vector<LstmRef>& layers,
                    const StackCache<T>& cache, const std::vector<Mat<T>>* d_top,
                    const Mat<T>* d_last_concat, ParamStore<T>& grads, Mat<T>* dx_accum) {
  const std::size_t B = cache.batch;
  const std::size_t steps = cache.steps;
  const std::size_t L = layers.size();
  std::size_t concat_off = 0;
  std::vector<std::size_t> layer_off(L);
  for (std::size_t li = 0; li < L; ++li) {
    layer_off[li] = concat_off;
    concat_off += layers[li].hidden;
  }

  // dh[t] carries the gradient flowing into layer li's hidden state at step t
  // from everything above it (top-level losses and the layer li+1 inputs).
  std::vector<Mat<T>> dh(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    dh[t].resize(B, layers[L - 1].hidden);
    if (d_top != nullptr) {
      const Mat<T>& src = (*d_top)[t];
      for (std::size_t i = 0; i < src.size(); ++i) dh[t].data()[i] += src.data()[i];
    }
  }

  for (std::size_t li_rev = 0; li_rev < L; ++li_rev) {
    const std::size_t li = L - 1 - li_rev;
    const LstmRef& r = layers[li];
    const int H = r.hidden;
    if (d_last_concat != nullptr) {
      for (std::size_t bi = 0; bi < B; ++bi)
        for (int j = 0; j < H; ++j)
          dh[steps - 1].at(bi, j) += d_last_concat->at(bi, layer_off[li] + j);
    }
    Mat<T>& gwx = grads[r.wx];
    Mat<T>& gwh = grads[r.wh];
    Mat<T>& gb = grads[r.b];
    std::vector<Mat<T>> dx_below;
    if (li > 0) {
      dx_below.resize(steps);
      for (auto& m : dx_below) m.resize(B, r.input);
    }
    Mat<T> dc(B, H);
    Mat<T> dpre(B, 4 * H);
    Mat<T> dh_carry(B, H);
    for (std::size_t t_rev = 0; t_rev < steps; ++t_rev) {
      const std::size_t t = steps - 1 - t_rev;
      const Mat<T>& ifog = cache.ifog[li][t];
      const Mat<T>& cell = cache.cell[li][t];
      const Mat<T>* c_prev = t > 0 ? &cache.cell[li][t - 1] : nullptr;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* gr = ifog.row(bi);
        const T* cr = cell.row(bi);
        const T* cp = c_prev != nullptr ? c_prev->row(bi) : nullptr;
        T* dhr = dh[t].row(bi);
        const T* dhc = dh_carry.row(bi);
        T* dcr = dc.row(bi);
        T* dp = dpre.row(bi);
        for (int j = 0; j < H; ++j) {
          T i_g = gr[j], f_g = gr[H + j], o_g = gr[2 * H + j], c_g = gr[3 * H + j];
          T tc = std::tanh(cr[j]);
          T dhv = dhr[j] + (t_rev > 0 ? dhc[j] : T(0));
          T dov = dhv * tc;
          T dcv = dcr[j] + dhv * o_g * (T(1) - tc * tc);
          T div = dcv * c_g;
          T dgv = dcv * i_g;
          T dfv = cp != nullptr ? dcv * cp[j] : T(0);
          dcr[j] = dcv * f_g;  // becomes dc for step t-1
          dp[j] = div * i_g * (T(1) - i_g);
          dp[H + j] = dfv * f_g * (T(1) - f_g);
          dp[2 * H + j] = dov * o_g * (T(1) - o_g);
          dp[3 * H + j] = dgv * (T(1) - c_g * c_g);
        }
      }
      const Mat<T>& x_t = li == 0 ? *cache.inputs[t] : cache.hidden[li - 1][t];
      matmul_tn(dpre, x_t, gwx);
      if (t > 0) matmul_tn(dpre, cache.hidden[li][t - 1], gwh);
      add_col_sums(dpre, gb.row_span(0));
      if (t > 0) {
        dh_carry.zero();
        matmul_nn(dpre, p[r.wh], dh_carry);
      }
      if (li > 0) {
        matmul_nn(dpre, p[r.wx], dx_below[t]);
      } else if (dx_accum != nullptr) {
        matmul_nn(dpre, p[r.wx], *dx_accum);
      }
    }
    if (li > 0) {
      for (std::size_t t = 0; t < steps; ++t) {
        dh[t] = std::move(dx_below[t]);
      }
    }
  }
}

// Y (B x out) = X (B x in) * W^T + b
template <class T>
void affine_forward(const ParamStore<T>& p, const AffineRef& r, const Mat<T>& x, Mat<T>& y) {
  require_dim(static_cast<int>(x.cols()) == r.in, "affine_forward: input width");
  y.resize(x.rows(), r.out);
  matmul_nt(x, p[r.w], y);
  add_row_inplace(y, p[r.b].row_span(0));
}

template <class T>
void affine_backward(const ParamStore<T>& p, const AffineRef& r, const Mat<T>& x,
                     const Mat<T>& dy, ParamStore<T>& grads, Mat<T>* dx) {
  matmul_tn(dy, x, grads[r.w]);
  add_col_sums(dy, grads[r.b].row_span(0));
  if (dx != nullptr) matmul_nn(dy, p[r.w], *dx);
}

// ---- gradient computation contract ----

// A scalar loss with an exact reverse-mode gradient. value() and
// add_gradients() must describe the same function of the store; tests verify
// the pair against central finite differences of value() alone.
template <class T>
struct DifferentiableLoss {
  virtual ~DifferentiableLoss() = default;
  virtual T value(const ParamStore<T>& params) const = 0;
  virtual void add_gradients(const ParamStore<T>& params, ParamStore<T>& grads) const = 0;
};

template <class T>
ParamStore<T> compute_gradients(const DifferentiableLoss<T>& loss, const ParamStore<T>& params) {
  T v = loss.value(params);
  if (!std::isfinite(static_cast<double>(v))) throw NumericError("loss is not finite");
  ParamStore<T> grads = params.zeros_like();
  loss.add_gradients(params, grads);
  return grads;
}

}  // namespace fhvae::net
