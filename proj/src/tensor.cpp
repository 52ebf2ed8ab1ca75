#include "resbm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Core>

#include "resbm/error.hpp"

namespace resbm {

namespace {

thread_local Tape* g_active_tape = nullptr;

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void require_2d(const Tensor& t, std::string_view op) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

// Dense kernels on row-major buffers, all accumulating into C.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

auto as_index(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C[M x N] += A[M x K] * B[K x N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  MutMap(c, as_index(m), as_index(n)).noalias() +=
      ConstMap(a, as_index(m), as_index(k)) * ConstMap(b, as_index(k), as_index(n));
}

// C[M x N] += A[K x M]^T * B[K x N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  MutMap(c, as_index(m), as_index(n)).noalias() +=
      ConstMap(a, as_index(k), as_index(m)).transpose() * ConstMap(b, as_index(k), as_index(n));
}

// C[M x N] += A[M x K] * B[N x K]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  MutMap(c, as_index(m), as_index(n)).noalias() +=
      ConstMap(a, as_index(m), as_index(k)) * ConstMap(b, as_index(n), as_index(k)).transpose();
}

// Number of elements of `b` when it broadcasts against `a`.
std::size_t broadcast_span(const Tensor& a, const Tensor& b, std::string_view op) {
  if (b.numel() == 1) return 1;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(bs) + " onto " +
                         shape_str(as));
  }
  return b.numel();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  if (shape.empty() || std::any_of(shape.begin(), shape.end(), [](std::size_t e) { return e == 0; })) {
    throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty() || std::any_of(shape.begin(), shape.end(), [](std::size_t e) { return e == 0; })) {
    throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  if (rows.empty() || rows.front().empty()) throw DimensionError("matrix: empty rows");
  const std::size_t cols = rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * cols);
  for (const auto& row : rows) {
    if (row.size() != cols) throw DimensionError("matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from({rows.size(), cols}, std::move(values), requires_grad);
}

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::numel() const { return impl().data.size(); }

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return impl().shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return impl().shape[1];
}

std::span<double> Tensor::data() const { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl().data[r * cols() + c]; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<double> Tensor::grad() const {
  Impl& i = impl();
  if (i.grad.empty()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

void Tensor::zero_grad() {
  Impl& i = impl();
  std::fill(i.grad.begin(), i.grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  const Impl& i = impl();
  auto copy = std::make_shared<Impl>(i);
  return Tensor(std::move(copy));
}

// ---------------------------------------------------------------- Tape

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  output.set_requires_grad(true);
  records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(Tensor loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  const bool on_tape = std::any_of(records_.rbegin(), records_.rend(), [&](const Record& r) {
    return r.output.same_storage(loss);
  });
  if (!on_tape) throw ContractError("backward: loss was not produced on this tape");
  loss.grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

// ---------------------------------------------------------------- ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (should_record({&a, &b})) {
    Tape::active()->record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(g, b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(a.data().data(), g, b.grad().data(), k, m, n);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor out = Tensor::zeros({m, n});
  gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (should_record({&a, &b})) {
    Tape::active()->record("matmul_nt", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nn(g, b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(g, a.data().data(), b.grad().data(), n, m, k);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_span(a, b, "add");
  Tensor out = Tensor::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i % nb];
  if (should_record({&a, &b})) {
    Tape::active()->record("add", {a, b}, out, [a, b, out, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_span(a, b, "sub");
  Tensor out = Tensor::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i % nb];
  if (should_record({&a, &b})) {
    Tape::active()->record("sub", {a, b}, out, [a, b, out, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_span(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i % nb];
  if (should_record({&a, &b})) {
    Tape::active()->record("mul", {a, b}, out, [a, b, out, nb]() mutable {
      auto g = out.grad();
      auto ad = a.data();
      auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i % nb];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * ad[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * factor;
  if (should_record({&a})) {
    Tape::active()->record("scale", {a}, out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor silu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * sigmoid(ad[i]);
  if (should_record({&a})) {
    Tape::active()->record("silu", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid(ad[i]);
        ga[i] += g[i] * s * (1.0 + ad[i] * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor rms_normalize(const Tensor& a, double eps) {
  const std::size_t d = a.shape().back();
  const std::size_t groups = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape());
  std::vector<double> inv_rms(groups);
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t r = 0; r < groups; ++r) {
    const double* x = ad.data() + r * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[j] * x[j];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = x[j] * inv_rms[r];
  }
  if (should_record({&a})) {
    Tape::active()->record("rms_normalize", {a}, out,
                           [a, out, inv_rms = std::move(inv_rms), d, groups]() mutable {
                             auto g = out.grad();
                             auto y = out.data();
                             auto ga = a.grad();
                             for (std::size_t r = 0; r < groups; ++r) {
                               double gy = 0.0;
                               for (std::size_t j = 0; j < d; ++j) gy += g[r * d + j] * y[r * d + j];
                               gy /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                 ga[r * d + j] += inv_rms[r] * (g[r * d + j] - y[r * d + j] * gy);
                               }
                             }
                           });
  }
  return out;
}

Tensor softmax_rows(const Tensor& a, bool causal) {
  require_2d(a, "softmax_rows");
  const std::size_t rows = a.rows(), cols = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t live = causal ? std::min(cols, r + 1) : cols;
    const double* x = ad.data() + r * cols;
    double* y = o.data() + r * cols;
    const double mx = *std::max_element(x, x + live);
    double z = 0.0;
    for (std::size_t j = 0; j < live; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < live; ++j) y[j] /= z;
  }
  if (should_record({&a})) {
    Tape::active()->record("softmax_rows", {a}, out, [a, out, rows, cols]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto ga = a.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          ga[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (should_record({&a})) {
    Tape::active()->record("sum", {a}, out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (double& v : a.grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (should_record({&a})) {
    Tape::active()->record("reshape", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_2d(a, "slice_cols");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (count == 0 || start + count > cols) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  }
  Tensor out = Tensor::zeros({rows, count});
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(ad.data() + r * cols + start, count, o.data() + r * count);
  if (should_record({&a})) {
    Tape::active()->record("slice_cols", {a}, out, [a, out, rows, cols, start, count]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < count; ++j) ga[r * cols + start + j] += g[r * count + j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor out = Tensor::zeros({rows, total});
  auto o = out.data();
  std::size_t offset = 0;
  bool record = false;
  for (const Tensor& p : parts) {
    const std::size_t c = p.cols();
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd.data() + r * c, c, o.data() + r * total + offset);
    offset += c;
    record = record || p.requires_grad();
  }
  if (record && Tape::active() != nullptr) {
    Tape::active()->record("concat_cols", parts, out, [parts, out, rows, total]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        const std::size_t c = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * total + offset + j];
        }
        offset += c;
      }
    });
  }
  return out;
}

Tensor resize_cols(const Tensor& a, std::size_t cols) {
  require_2d(a, "resize_cols");
  const std::size_t rows = a.rows(), in_cols = a.cols();
  if (cols == 0) throw DimensionError("resize_cols: target width must be >= 1");
  const std::size_t keep = std::min(in_cols, cols);
  Tensor out = Tensor::zeros({rows, cols});
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(ad.data() + r * in_cols, keep, o.data() + r * cols);
  if (should_record({&a})) {
    Tape::active()->record("resize_cols", {a}, out, [a, out, rows, in_cols, cols, keep]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < keep; ++j) ga[r * in_cols + j] += g[r * cols + j];
    });
  }
  return out;
}

Tensor rope(const Tensor& a, std::size_t head_dim, double base) {
  require_2d(a, "rope");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (head_dim == 0 || head_dim % 2 != 0 || cols % head_dim != 0) {
    throw DimensionError("rope: head_dim " + std::to_string(head_dim) +
                         " must be even and divide " + shape_str(a.shape()));
  }
  const std::size_t half = head_dim / 2;
  std::vector<double> cosv(rows * half), sinv(rows * half);
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cosv[p * half + i] = std::cos(angle);
      sinv[p * half + i] = std::sin(angle);
    }
  }
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t h = 0; h < cols; h += head_dim) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t j = p * cols + h + 2 * i;
        const double c = cosv[p * half + i], s = sinv[p * half + i];
        o[j] = ad[j] * c - ad[j + 1] * s;
        o[j + 1] = ad[j] * s + ad[j + 1] * c;
      }
    }
  }
  if (should_record({&a})) {
    Tape::active()->record("rope", {a}, out,
                           [a, out, rows, cols, head_dim, half, cosv = std::move(cosv),
                            sinv = std::move(sinv)]() mutable {
                             auto g = out.grad();
                             auto ga = a.grad();
                             for (std::size_t p = 0; p < rows; ++p) {
                               for (std::size_t h = 0; h < cols; h += head_dim) {
                                 for (std::size_t i = 0; i < half; ++i) {
                                   const std::size_t j = p * cols + h + 2 * i;
                                   const double c = cosv[p * half + i], s = sinv[p * half + i];
                                   ga[j] += g[j] * c + g[j + 1] * s;
                                   ga[j + 1] += -g[j] * s + g[j + 1] * c;
                                 }
                               }
                             }
                           });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding");
  const std::size_t vocab = table.rows(), width = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(vocab));
    }
  }
  Tensor out = Tensor::zeros({idv.size(), width});
  auto o = out.data();
  auto td = table.data();
  for (std::size_t r = 0; r < idv.size(); ++r)
    std::copy_n(td.data() + static_cast<std::size_t>(idv[r]) * width, width, o.data() + r * width);
  if (should_record({&table})) {
    Tape::active()->record("embedding", {table}, out, [table, out, idv = std::move(idv), width]() mutable {
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t r = 0; r < idv.size(); ++r) {
        double* dst = gt.data() + static_cast<std::size_t>(idv[r]) * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += g[r * width + j];
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()) + " logits");
  }
  std::vector<int> tv(targets.begin(), targets.end());
  for (int t : tv) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("target id " + std::to_string(t) + " outside vocabulary of size " +
                      std::to_string(vocab));
    }
  }
  auto ld = logits.data();
  std::vector<double> probs(rows * vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = ld.data() + r * vocab;
    const double mx = *std::max_element(x, x + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(x[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += std::log(z) + mx - x[static_cast<std::size_t>(tv[r])];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  if (should_record({&logits})) {
    Tape::active()->record("cross_entropy", {logits}, out,
                           [logits, out, probs = std::move(probs), tv = std::move(tv), rows,
                            vocab]() mutable {
                             const double g = out.grad()[0] / static_cast<double>(rows);
                             auto gl = logits.grad();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < vocab; ++j) {
                                 gl[r * vocab + j] += g * probs[r * vocab + j];
                               }
                               gl[r * vocab + static_cast<std::size_t>(tv[r])] -= g;
                             }
                           });
  }
  return out;
}

}  // namespace resbm
