#pragma once

#include <functional>
#include <vector>

#include "remb/tensor.hpp"

namespace remb::ad {

class Graph;

// Handle into a Graph's node list. Cheap to copy; valid for the graph's lifetime.
struct Value {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

// Reverse-mode tape over dense tensors. One graph per computation; graphs are
// independent and never share mutable state, so distinct graphs may be
// evaluated on distinct threads. A non-recording graph runs the same forward
// kernels but skips all backward bookkeeping.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  // Leaf that never receives a gradient (data, masks, labels).
  Value input(Tensor t);
  // Leaf that accumulates a gradient during backward().
  Value param(Tensor t);

  // Runs reverse-mode accumulation from a scalar loss. A second call without a
  // fresh graph is an error; gradients are not resettable by design.
  void backward(Value loss);

  const Tensor& value(Value v) const;
  // Gradient of the last backward() target w.r.t. v (zeros if untouched).
  const Tensor& grad(Value v);

  std::size_t node_count() const { return nodes_.size(); }
  // Node ids in the order their backward rules ran; for order auditing.
  const std::vector<int>& backward_order() const { return backward_order_; }

 private:
  friend struct OpAccess;

  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Graph&, int)> backprop;  // adds into parents' grads
    const char* op = "leaf";
    int pending_consumers = 0;  // backward-order instrumentation
  };

  int push(Node n);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor& grad_buf(int id);

  std::vector<Node> nodes_;
  std::vector<int> backward_order_;
  bool recording_;
  bool backward_done_ = false;
};

// --- ops ------------------------------------------------------------------
// All ops validate shapes, reject non-finite results, and register exact
// backward rules. Reductions run in input order so results are reproducible.

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value a, double c);
Value tanh(Value a);
Value exp(Value a);
Value log(Value a);

Value matmul(Value a, Value b);
Value transpose(Value a);

Value row_softmax(Value a);
Value row_log_softmax(Value a);
Value l2_normalize(Value a);
// Row-wise layer norm with learned gain/bias; population variance, eps 1e-5.
Value layer_norm(Value x, Value gain, Value bias);

Value gather_rows(Value x, const std::vector<int>& ids);
Value slice_cols(Value x, int start, int len);
Value concat_cols(const std::vector<Value>& parts);
Value add_row_bias(Value x, Value bias);
Value reshape(Value x, std::vector<int> shape);
Value stack_rows(const std::vector<Value>& rows);
// y[i] = x[i, cols[i]]; one picked column per row.
Value gather_rowwise(Value x, const std::vector<int>& cols);

Value sum_all(Value a);
Value mean_all(Value a);
Value clamp(Value a, double lo, double hi);
Value minimum(Value a, Value b);  // ties take the left branch

}  // namespace remb::ad
