#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace resbm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float64 tensor with optional gradient storage.
///
/// Tensor is a shared handle: copies alias the same buffer, which is what
/// the tape needs to route gradients back to parameters. Use clone() for a
/// deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// rows x cols matrix from nested initializer data, handy in tests.
  static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  /// Extent of a 2-D tensor; throws DimensionError otherwise.
  std::size_t rows() const;
  std::size_t cols() const;

  // Like a shared_ptr, constness is shallow: a const handle still exposes
  // mutable storage. Backward closures rely on this.
  std::span<double> data() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<double> grad() const;
  void zero_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

/// Reverse-mode tape. Operations append records while a tape is active on
/// the current thread (see Tape::Scope); backward() replays them in exact
/// reverse order. A tape is single-threaded; distinct threads use distinct
/// tapes.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Record {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  /// Activates a tape for the current thread for the guard's lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);
  /// Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad
  /// tensor reachable from the loss. Grads accumulate: callers zero them
  /// between steps.
  void backward(Tensor loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

 private:
  std::vector<Record> records_;
};

// Differentiable operations. Each returns a fresh tensor; when a tape is
// active and any input requires grad, the output requires grad and a
// backward rule is recorded.

/// [M x K] * [K x N] -> [M x N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [M x K] * [N x K]^T -> [M x N]. Linear layers store weights as
/// [out x in], so y = matmul_nt(x, w).
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Elementwise with trailing-dimension broadcasting: b's shape must equal a
/// suffix of a's shape, or b must hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor silu(const Tensor& a);
/// x / sqrt(mean(x^2) + eps) over consecutive groups of the last dimension.
Tensor rms_normalize(const Tensor& a, double eps = 1e-6);
/// Row-wise softmax of a 2-D tensor. With causal = true, entry (i, j) for
/// j > i is masked out (probability exactly 0).
Tensor softmax_rows(const Tensor& a, bool causal = false);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Copy with a new shape of equal element count.
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Zero-pad or truncate the columns of a 2-D tensor to `cols` (leading
/// columns kept). This is the rectangular identity x * I_{c x C}.
Tensor resize_cols(const Tensor& a, std::size_t cols);

/// Rotary position embedding applied independently to each head_dim chunk
/// of every row; row index is the position. head_dim must be even.
Tensor rope(const Tensor& a, std::size_t head_dim, double base = 10000.0);

/// Rows of `table` [V x H] selected by ids -> [ids.size() x H].
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace resbm
