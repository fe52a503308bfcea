#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vtff {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad();
};

// Value-semantics handle over a shared node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::span<float> data() { return node_->data; }
  std::span<const float> data() const { return node_->data; }
  float item() const;

  // Gradient of the last backward pass; zeros if this tensor was untouched.
  std::vector<float> grad() const;
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
// current thread; primitives append one entry per recorded op. Destruction
// restores the previously active tape. Tensors touched by a tape must stay on
// the constructing thread until backward() completes.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output,
              std::function<void()> backward_fn);

  // Reverse traversal; seeds d(loss)/d(loss) = 1. Loss must be scalar.
  void backward(const Tensor& loss);

  size_t op_count() const { return ops_.size(); }

 private:
  struct Op {
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    std::function<void()> backward_fn;
  };
  std::vector<Op> ops_;
  Tape* previous_ = nullptr;
};

enum class Activation { kRelu, kSigmoid, kGelu };

// ---- primitives (all record onto the active tape when grads are needed) ----

Tensor add(const Tensor& a, const Tensor& b);   // numpy-style broadcasting
Tensor mul(const Tensor& a, const Tensor& b);   // numpy-style broadcasting
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// Channel-last convolution, cross-correlation convention.
// input: [H,W,Cin] or [B,H,W,Cin]; kernel: [k,k,Cin,Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

Tensor activation(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation, see gelu_forward_value
Tensor log_elem(const Tensor& x);

float gelu_forward_value(float x);

Tensor softmax(const Tensor& x, int axis);

// Normalization over the last axis; gamma/beta are [C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

enum class Mode { kTrain, kEval };

// Per-channel (last axis) batch normalization. Train mode uses statistics over
// all non-channel positions and updates running_mean/running_var in place with
// the given momentum; eval mode uses the running statistics only.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Mode mode,
                  float momentum, float eps);

// Mean over spatial axes: [H,W,C] -> [1,1,C], [B,H,W,C] -> [B,1,1,C].
Tensor adaptive_avg_pool(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor select(const Tensor& x, int64_t index);       // along axis 0, drops it
Tensor pick(const Tensor& x, int64_t flat_index);    // scalar element

// Toggle for the finite-value guard run after every forward primitive.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace vtff
