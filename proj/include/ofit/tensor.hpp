#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ofit {

/// n-dimensional double-precision array with an optional gradient slot.
/// Copies are shallow handles to shared storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(std::vector<int64_t> shape, std::vector<double> data,
         bool requires_grad = false);

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int64_t> shape, double value);
  static Tensor scalar(double value);

  const std::vector<int64_t>& shape() const;
  int64_t size() const;
  int64_t dim(size_t axis) const;
  size_t rank() const;

  std::span<const double> data() const;
  std::span<double> data();

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;  // throws if absent
  /// Gradient storage, zero-initialized on first access.
  std::span<double> grad_mut();
  void zero_grad();
  void drop_grad();

  /// Value of a single-element tensor.
  double item() const;

  /// Deep copy; the copy carries no gradient and shares no storage.
  Tensor clone() const;

  /// Same storage viewed under a different shape of equal element count.
  Tensor reshaped(std::vector<int64_t> new_shape) const;

  /// Stable identity of the underlying storage, used by the tape.
  const void* id() const;

  bool defined() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

std::string shape_to_string(const std::vector<int64_t>& shape);

enum class Padding { valid, same };

/// Per-channel running statistics owned by a batchnorm layer.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  void init(int64_t channels) {
    running_mean.assign(static_cast<size_t>(channels), 0.0);
    running_var.assign(static_cast<size_t>(channels), 1.0);
  }
};

/// Records the operations of one forward pass so backward() can replay
/// them in reverse. A tape and its tensors belong to a single thread.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backprop;
  };

  void record(Node node) { nodes_.push_back(std::move(node)); }
  size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Makes `tape` the active recorder for the current thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Forward operators. Each records itself on the active tape when any input
// requires a gradient; the numeric result does not depend on recording.

Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise add; b may also be a vector broadcast over the last axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
/// x: (n,h,w,c_in), filters: (kh,kw,c_in,c_out); stride 1, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& filters, Padding padding);
/// 2x2 window, stride 2; odd trailing rows/columns are dropped.
Tensor maxpool2d(const Tensor& x);
/// x: (n,c) or (n,h,w,c); gamma/beta: (c). Training mode uses batch
/// statistics and updates `state`; eval mode reads `state`.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training);
/// Inverted dropout: kept activations are scaled by 1/keep at train time,
/// so eval mode is the identity.
Tensor dropout(const Tensor& x, double rate, bool training, uint64_t seed);
Tensor flatten(const Tensor& x);
/// Fused, log-sum-exp stabilized; logits (n,K), labels in [0,K). Returns
/// the mean loss as a scalar.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor sum(const Tensor& x);

/// Attribute bag for the string-dispatched entry point.
struct OpAttrs {
  Padding padding = Padding::valid;
  bool training = false;
  double rate = 0.0;
  uint64_t seed = 0;
  double factor = 1.0;
  std::vector<int> labels;
  BatchNormState* bn_state = nullptr;
};

/// Dispatch by operator name; unknown names are an error.
Tensor forward(std::string_view op_kind, std::span<const Tensor> inputs,
               const OpAttrs& attrs = {});

/// Reverse-mode sweep: seeds d(loss)/d(loss)=1 and accumulates gradients
/// into every requires_grad tensor reachable from `loss` on `tape`.
void backward(const Tensor& loss, Tape& tape);

/// Gradient of a scalar-valued function at x. x itself is left untouched;
/// the function is evaluated on a gradient-enabled clone.
Tensor input_gradient(const std::function<Tensor(const Tensor&)>& scalar_fn,
                      const Tensor& x);

}  // namespace ofit
