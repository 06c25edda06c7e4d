#include "remb/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "remb/error.hpp"

namespace remb::ad {

namespace {

void check_same_graph(Value a, Value b, const char* op) {
  if (a.g != b.g) data_error(std::string(op) + ": operands belong to different graphs");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    data_error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

constexpr double kLayerNormEps = 1e-5;

}  // namespace

// Grants op implementations access to Graph internals.
struct OpAccess {
  static int push(Graph& g, Graph::Node n) { return g.push(std::move(n)); }
  static Graph::Node& node(Graph& g, int id) { return g.node(id); }
  static const Graph::Node& node(const Graph& g, int id) { return g.node(id); }
  static Tensor& grad_buf(Graph& g, int id) { return g.grad_buf(id); }

  // Assembles a node from a computed value; drops backward info on
  // non-recording graphs or when no parent needs gradients.
  static Value make(Graph* g, const char* op, Tensor value, std::vector<int> parents,
                    std::function<void(Graph&, int)> backprop) {
    value.ensure_finite(op);
    Graph::Node n;
    n.value = std::move(value);
    n.op = op;
    if (g->recording()) {
      bool needs = false;
      for (int p : parents) needs = needs || node(*g, p).requires_grad;
      if (needs) {
        n.requires_grad = true;
        n.parents = std::move(parents);
        n.backprop = std::move(backprop);
      }
    }
    return Value{g, push(*g, std::move(n))};
  }
};

int Graph::push(Node n) {
  for (int p : n.parents) {
    if (p < 0 || p >= static_cast<int>(nodes_.size())) {
      data_error("graph op references a node outside this graph (cycle or foreign handle)");
    }
  }
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buf(int id) {
  Node& n = node(id);
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

Value Graph::input(Tensor t) {
  t.ensure_finite("input");
  Node n;
  n.value = std::move(t);
  n.op = "input";
  return Value{this, push(std::move(n))};
}

Value Graph::param(Tensor t) {
  t.ensure_finite("param");
  Node n;
  n.value = std::move(t);
  n.requires_grad = true;
  n.op = "param";
  return Value{this, push(std::move(n))};
}

const Tensor& Graph::value(Value v) const { return node(v.id).value; }

const Tensor& Graph::grad(Value v) {
  Node& n = node(v.id);
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

void Graph::backward(Value loss) {
  if (!recording_) data_error("backward on a non-recording graph");
  if (backward_done_) data_error("backward called twice on the same graph; build a fresh graph instead");
  if (loss.g != this) data_error("backward: loss belongs to a different graph");
  if (node(loss.id).value.numel() != 1) {
    data_error("backward requires a scalar root, got shape " + node(loss.id).value.shape_str());
  }
  backward_done_ = true;

  // Iterative post-order DFS over parents; ids only reference earlier ids, so
  // the graph is acyclic by construction.
  std::vector<int> topo;
  std::vector<char> visited(nodes_.size(), 0);
  std::vector<std::pair<int, std::size_t>> stack;
  stack.emplace_back(loss.id, 0);
  visited[static_cast<std::size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    auto& [id, next] = stack.back();
    const Node& n = node(id);
    if (next < n.parents.size()) {
      int p = n.parents[next++];
      if (!visited[static_cast<std::size_t>(p)]) {
        visited[static_cast<std::size_t>(p)] = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(id);
      stack.pop_back();
    }
  }

  // Consumer counts within the reachable subgraph: a node's gradient must be
  // final before its own backward rule runs.
  for (int id : topo) {
    for (int p : node(id).parents) node(p).pending_consumers += 1;
  }

  grad_buf(loss.id).data[0] = 1.0;
  backward_order_.clear();
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node& n = node(*it);
    if (n.pending_consumers != 0) {
      data_error("backward order violated: node consumed before its gradient was finalized");
    }
    if (n.backprop && !n.grad.data.empty()) {
      n.grad.ensure_finite("backward gradient");
      n.backprop(*this, *it);
      backward_order_.push_back(*it);
    }
    for (int p : n.parents) node(p).pending_consumers -= 1;
  }
}

// --- elementwise ------------------------------------------------------------

Value add(Value a, Value b) {
  check_same_graph(a, b, "add");
  const Tensor& ta = a.g->value(a);
  const Tensor& tb = b.g->value(b);
  check_same_shape(ta, tb, "add");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  int pa = a.id, pb = b.id;
  return OpAccess::make(a.g, "add", std::move(out), {pa, pb}, [pa, pb](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    if (OpAccess::node(g, pa).requires_grad) {
      Tensor& ga = OpAccess::grad_buf(g, pa);
      for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
    }
    if (OpAccess::node(g, pb).requires_grad) {
      Tensor& gb = OpAccess::grad_buf(g, pb);
      for (std::size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
    }
  });
}

Value sub(Value a, Value b) {
  check_same_graph(a, b, "sub");
  const Tensor& ta = a.g->value(a);
  const Tensor& tb = b.g->value(b);
  check_same_shape(ta, tb, "sub");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
  int pa = a.id, pb = b.id;
  return OpAccess::make(a.g, "sub", std::move(out), {pa, pb}, [pa, pb](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    if (OpAccess::node(g, pa).requires_grad) {
      Tensor& ga = OpAccess::grad_buf(g, pa);
      for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
    }
    if (OpAccess::node(g, pb).requires_grad) {
      Tensor& gb = OpAccess::grad_buf(g, pb);
      for (std::size_t i = 0; i < go.data.size(); ++i) gb.data[i] -= go.data[i];
    }
  });
}

Value mul(Value a, Value b) {
  check_same_graph(a, b, "mul");
  const Tensor& ta = a.g->value(a);
  const Tensor& tb = b.g->value(b);
  check_same_shape(ta, tb, "mul");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  int pa = a.id, pb = b.id;
  return OpAccess::make(a.g, "mul", std::move(out), {pa, pb}, [pa, pb](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& va = OpAccess::node(g, pa).value;
    const Tensor& vb = OpAccess::node(g, pb).value;
    if (OpAccess::node(g, pa).requires_grad) {
      Tensor& ga = OpAccess::grad_buf(g, pa);
      for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * vb.data[i];
    }
    if (OpAccess::node(g, pb).requires_grad) {
      Tensor& gb = OpAccess::grad_buf(g, pb);
      for (std::size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i] * va.data[i];
    }
  });
}

Value scale(Value a, double c) {
  if (!std::isfinite(c)) numeric_error("scale: non-finite constant");
  Tensor out = a.g->value(a);
  for (double& x : out.data) x *= c;
  int pa = a.id;
  return OpAccess::make(a.g, "scale", std::move(out), {pa}, [pa, c](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += c * go.data[i];
  });
}

Value tanh(Value a) {
  Tensor out = a.g->value(a);
  for (double& x : out.data) x = std::tanh(x);
  int pa = a.id;
  return OpAccess::make(a.g, "tanh", std::move(out), {pa}, [pa](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& y = OpAccess::node(g, self).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

Value exp(Value a) {
  Tensor out = a.g->value(a);
  for (double& x : out.data) x = std::exp(x);
  int pa = a.id;
  return OpAccess::make(a.g, "exp", std::move(out), {pa}, [pa](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& y = OpAccess::node(g, self).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * y.data[i];
  });
}

Value log(Value a) {
  const Tensor& ta = a.g->value(a);
  Tensor out = ta;
  for (double& x : out.data) {
    if (x <= 0.0) numeric_error("log of non-positive value");
    x = std::log(x);
  }
  int pa = a.id;
  return OpAccess::make(a.g, "log", std::move(out), {pa}, [pa](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& vx = OpAccess::node(g, pa).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] / vx.data[i];
  });
}

// --- linear algebra ----------------------------------------------------------

Value matmul(Value a, Value b) {
  check_same_graph(a, b, "matmul");
  const Tensor& ta = a.g->value(a);
  const Tensor& tb = b.g->value(b);
  if (ta.rank() != 2 || tb.rank() != 2) data_error("matmul: rank-2 operands required");
  if (ta.cols() != tb.rows()) {
    data_error("matmul: inner dimensions disagree " + ta.shape_str() + " vs " + tb.shape_str());
  }
  const int m = ta.rows(), k = ta.cols(), n = tb.cols();
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const double av = ta.at(i, l);
      const double* brow = &tb.data[static_cast<std::size_t>(l) * n];
      double* orow = &out.data[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  int pa = a.id, pb = b.id;
  return OpAccess::make(a.g, "matmul", std::move(out), {pa, pb}, [pa, pb, m, k, n](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& va = OpAccess::node(g, pa).value;
    const Tensor& vb = OpAccess::node(g, pb).value;
    if (OpAccess::node(g, pa).requires_grad) {
      Tensor& ga = OpAccess::grad_buf(g, pa);  // dA += dC · Bᵀ
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          const double gv = go.at(i, j);
          const double* brow = &vb.data[0];
          for (int l = 0; l < k; ++l) ga.at(i, l) += gv * brow[static_cast<std::size_t>(l) * n + j];
        }
      }
    }
    if (OpAccess::node(g, pb).requires_grad) {
      Tensor& gb = OpAccess::grad_buf(g, pb);  // dB += Aᵀ · dC
      for (int i = 0; i < m; ++i) {
        for (int l = 0; l < k; ++l) {
          const double av = va.at(i, l);
          const double* grow = &go.data[static_cast<std::size_t>(i) * n];
          double* gbrow = &gb.data[static_cast<std::size_t>(l) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Value transpose(Value a) {
  const Tensor& ta = a.g->value(a);
  if (ta.rank() != 2) data_error("transpose: rank-2 operand required");
  const int m = ta.rows(), n = ta.cols();
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = ta.at(i, j);
  int pa = a.id;
  return OpAccess::make(a.g, "transpose", std::move(out), {pa}, [pa, m, n](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga.at(i, j) += go.at(j, i);
  });
}

// --- normalizations ----------------------------------------------------------

Value row_softmax(Value a) {
  const Tensor& ta = a.g->value(a);
  if (ta.rank() != 2) data_error("row_softmax: rank-2 operand required");
  const int m = ta.rows(), n = ta.cols();
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = ta.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, ta.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(ta.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  int pa = a.id;
  return OpAccess::make(a.g, "row_softmax", std::move(out), {pa}, [pa, m, n](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& y = OpAccess::node(g, self).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += go.at(i, j) * y.at(i, j);
      for (int j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (go.at(i, j) - dot);
    }
  });
}

Value row_log_softmax(Value a) {
  const Tensor& ta = a.g->value(a);
  if (ta.rank() != 2) data_error("row_log_softmax: rank-2 operand required");
  const int m = ta.rows(), n = ta.cols();
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = ta.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, ta.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(ta.at(i, j) - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) out.at(i, j) = ta.at(i, j) - lse;
  }
  int pa = a.id;
  return OpAccess::make(a.g, "row_log_softmax", std::move(out), {pa}, [pa, m, n](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& y = OpAccess::node(g, self).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (int i = 0; i < m; ++i) {
      double gsum = 0.0;
      for (int j = 0; j < n; ++j) gsum += go.at(i, j);
      for (int j = 0; j < n; ++j) ga.at(i, j) += go.at(i, j) - std::exp(y.at(i, j)) * gsum;
    }
  });
}

Value l2_normalize(Value a) {
  const Tensor& ta = a.g->value(a);
  if (ta.rank() != 1) data_error("l2_normalize: rank-1 operand required");
  double norm_sq = 0.0;
  for (double x : ta.data) norm_sq += x * x;
  const double norm = std::sqrt(norm_sq);
  if (norm <= 1e-12) numeric_error("l2_normalize: near-zero-norm input");
  Tensor out = ta;
  for (double& x : out.data) x /= norm;
  int pa = a.id;
  return OpAccess::make(a.g, "l2_normalize", std::move(out), {pa}, [pa, norm](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& y = OpAccess::node(g, self).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    double dot = 0.0;
    for (std::size_t i = 0; i < go.data.size(); ++i) dot += go.data[i] * y.data[i];
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += (go.data[i] - y.data[i] * dot) / norm;
  });
}

Value layer_norm(Value x, Value gain, Value bias) {
  check_same_graph(x, gain, "layer_norm");
  check_same_graph(x, bias, "layer_norm");
  const Tensor& tx = x.g->value(x);
  const Tensor& tg = x.g->value(gain);
  const Tensor& tb = x.g->value(bias);
  if (tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1) data_error("layer_norm: expects matrix, gain vector, bias vector");
  const int m = tx.rows(), n = tx.cols();
  if (tg.shape[0] != n || tb.shape[0] != n) data_error("layer_norm: gain/bias length must equal row width");
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> inv_sigma(static_cast<std::size_t>(m));
  std::vector<double> xhat(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += tx.at(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = tx.at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_sigma[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      double xh = (tx.at(i, j) - mean) * is;
      xhat[static_cast<std::size_t>(i) * n + j] = xh;
      out.at(i, j) = xh * tg.at(j) + tb.at(j);
    }
  }
  int px = x.id, pg = gain.id, pb = bias.id;
  return OpAccess::make(
      x.g, "layer_norm", std::move(out), {px, pg, pb},
      [px, pg, pb, m, n, inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)](Graph& g, int self) {
        const Tensor& go = OpAccess::node(g, self).grad;
        const Tensor& vg = OpAccess::node(g, pg).value;
        if (OpAccess::node(g, pg).requires_grad) {
          Tensor& gg = OpAccess::grad_buf(g, pg);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gg.at(j) += go.at(i, j) * xhat[static_cast<std::size_t>(i) * n + j];
        }
        if (OpAccess::node(g, pb).requires_grad) {
          Tensor& gb = OpAccess::grad_buf(g, pb);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gb.at(j) += go.at(i, j);
        }
        if (OpAccess::node(g, px).requires_grad) {
          Tensor& gx = OpAccess::grad_buf(g, px);
          for (int i = 0; i < m; ++i) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
              double dxh = go.at(i, j) * vg.at(j);
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(i) * n + j];
            }
            const double is = inv_sigma[static_cast<std::size_t>(i)];
            for (int j = 0; j < n; ++j) {
              double dxh = go.at(i, j) * vg.at(j);
              double xh = xhat[static_cast<std::size_t>(i) * n + j];
              gx.at(i, j) += is * (dxh - sum_dxhat / n - xh * sum_dxhat_xhat / n);
            }
          }
        }
      });
}

// --- shape & selection ---------------------------------------------------------

Value gather_rows(Value x, const std::vector<int>& ids) {
  const Tensor& tx = x.g->value(x);
  if (tx.rank() != 2) data_error("gather_rows: rank-2 operand required");
  const int n = tx.cols();
  for (int id : ids) {
    if (id < 0 || id >= tx.rows()) data_error("gather_rows: row index out of range");
  }
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), n});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < n; ++j) out.at(static_cast<int>(i), j) = tx.at(ids[i], j);
  int px = x.id;
  return OpAccess::make(x.g, "gather_rows", std::move(out), {px}, [px, ids, n](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    Tensor& gx = OpAccess::grad_buf(g, px);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < n; ++j) gx.at(ids[i], j) += go.at(static_cast<int>(i), j);
  });
}

Value slice_cols(Value x, int start, int len) {
  const Tensor& tx = x.g->value(x);
  if (tx.rank() != 2) data_error("slice_cols: rank-2 operand required");
  if (start < 0 || len <= 0 || start + len > tx.cols()) data_error("slice_cols: range out of bounds");
  const int m = tx.rows();
  Tensor out = Tensor::zeros({m, len});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j) out.at(i, j) = tx.at(i, start + j);
  int px = x.id;
  return OpAccess::make(x.g, "slice_cols", std::move(out), {px}, [px, start, len, m](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    Tensor& gx = OpAccess::grad_buf(g, px);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j) gx.at(i, start + j) += go.at(i, j);
  });
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) data_error("concat_cols: no operands");
  Graph* g = parts[0].g;
  int m = g->value(parts[0]).rows();
  int total = 0;
  std::vector<int> widths;
  std::vector<int> pids;
  for (Value p : parts) {
    check_same_graph(parts[0], p, "concat_cols");
    const Tensor& t = g->value(p);
    if (t.rank() != 2 || t.rows() != m) data_error("concat_cols: row counts disagree");
    widths.push_back(t.cols());
    pids.push_back(p.id);
    total += t.cols();
  }
  Tensor out = Tensor::zeros({m, total});
  int off = 0;
  for (std::size_t k = 0; k < pids.size(); ++k) {
    const Tensor& t = g->value(Value{g, pids[k]});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < widths[k]; ++j) out.at(i, off + j) = t.at(i, j);
    off += widths[k];
  }
  return OpAccess::make(g, "concat_cols", std::move(out), pids, [pids, widths, m](Graph& g2, int self) {
    const Tensor& go = OpAccess::node(g2, self).grad;
    int off2 = 0;
    for (std::size_t k = 0; k < pids.size(); ++k) {
      if (OpAccess::node(g2, pids[k]).requires_grad) {
        Tensor& gp = OpAccess::grad_buf(g2, pids[k]);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < widths[k]; ++j) gp.at(i, j) += go.at(i, off2 + j);
      }
      off2 += widths[k];
    }
  });
}

Value add_row_bias(Value x, Value bias) {
  check_same_graph(x, bias, "add_row_bias");
  const Tensor& tx = x.g->value(x);
  const Tensor& tb = x.g->value(bias);
  if (tx.rank() != 2 || tb.rank() != 1 || tb.shape[0] != tx.cols()) {
    data_error("add_row_bias: bias length must equal row width");
  }
  const int m = tx.rows(), n = tx.cols();
  Tensor out = tx;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += tb.at(j);
  int px = x.id, pb = bias.id;
  return OpAccess::make(x.g, "add_row_bias", std::move(out), {px, pb}, [px, pb, m, n](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    if (OpAccess::node(g, px).requires_grad) {
      Tensor& gx = OpAccess::grad_buf(g, px);
      for (std::size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i];
    }
    if (OpAccess::node(g, pb).requires_grad) {
      Tensor& gb = OpAccess::grad_buf(g, pb);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb.at(j) += go.at(i, j);
    }
  });
}

Value reshape(Value x, std::vector<int> shape) {
  const Tensor& tx = x.g->value(x);
  Tensor out(std::move(shape), tx.data);
  int px = x.id;
  return OpAccess::make(x.g, "reshape", std::move(out), {px}, [px](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    Tensor& gx = OpAccess::grad_buf(g, px);
    for (std::size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i];
  });
}

Value stack_rows(const std::vector<Value>& rows) {
  if (rows.empty()) data_error("stack_rows: no operands");
  Graph* g = rows[0].g;
  const int n = g->value(rows[0]).shape[0];
  std::vector<int> pids;
  for (Value r : rows) {
    check_same_graph(rows[0], r, "stack_rows");
    const Tensor& t = g->value(r);
    if (t.rank() != 1 || t.shape[0] != n) data_error("stack_rows: rows must be equal-length vectors");
    pids.push_back(r.id);
  }
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), n});
  for (std::size_t i = 0; i < pids.size(); ++i) {
    const Tensor& t = g->value(Value{g, pids[i]});
    for (int j = 0; j < n; ++j) out.at(static_cast<int>(i), j) = t.at(j);
  }
  return OpAccess::make(g, "stack_rows", std::move(out), pids, [pids, n](Graph& g2, int self) {
    const Tensor& go = OpAccess::node(g2, self).grad;
    for (std::size_t i = 0; i < pids.size(); ++i) {
      if (!OpAccess::node(g2, pids[i]).requires_grad) continue;
      Tensor& gr = OpAccess::grad_buf(g2, pids[i]);
      for (int j = 0; j < n; ++j) gr.at(j) += go.at(static_cast<int>(i), j);
    }
  });
}

Value gather_rowwise(Value x, const std::vector<int>& cols) {
  const Tensor& tx = x.g->value(x);
  if (tx.rank() != 2) data_error("gather_rowwise: rank-2 operand required");
  if (static_cast<int>(cols.size()) != tx.rows()) data_error("gather_rowwise: need one column index per row");
  for (int c : cols) {
    if (c < 0 || c >= tx.cols()) data_error("gather_rowwise: column index out of range");
  }
  Tensor out = Tensor::zeros({static_cast<int>(cols.size())});
  for (std::size_t i = 0; i < cols.size(); ++i) out.at(static_cast<int>(i)) = tx.at(static_cast<int>(i), cols[i]);
  int px = x.id;
  return OpAccess::make(x.g, "gather_rowwise", std::move(out), {px}, [px, cols](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    Tensor& gx = OpAccess::grad_buf(g, px);
    for (std::size_t i = 0; i < cols.size(); ++i) gx.at(static_cast<int>(i), cols[i]) += go.at(static_cast<int>(i));
  });
}

// --- reductions & piecewise ----------------------------------------------------

Value sum_all(Value a) {
  const Tensor& ta = a.g->value(a);
  double s = 0.0;
  for (double x : ta.data) s += x;  // fixed input-order reduction
  int pa = a.id;
  return OpAccess::make(a.g, "sum_all", Tensor::scalar(s), {pa}, [pa](Graph& g, int self) {
    const double gv = OpAccess::node(g, self).grad.data[0];
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (double& x : ga.data) x += gv;
  });
}

Value mean_all(Value a) {
  const Tensor& ta = a.g->value(a);
  return scale(sum_all(a), 1.0 / static_cast<double>(ta.numel()));
}

Value clamp(Value a, double lo, double hi) {
  if (!(lo <= hi)) data_error("clamp: lo > hi");
  const Tensor& ta = a.g->value(a);
  Tensor out = ta;
  for (double& x : out.data) x = std::min(std::max(x, lo), hi);
  int pa = a.id;
  return OpAccess::make(a.g, "clamp", std::move(out), {pa}, [pa, lo, hi](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& vx = OpAccess::node(g, pa).value;
    Tensor& ga = OpAccess::grad_buf(g, pa);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      if (vx.data[i] > lo && vx.data[i] < hi) ga.data[i] += go.data[i];
    }
  });
}

Value minimum(Value a, Value b) {
  check_same_graph(a, b, "minimum");
  const Tensor& ta = a.g->value(a);
  const Tensor& tb = b.g->value(b);
  check_same_shape(ta, tb, "minimum");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(ta.data[i], tb.data[i]);
  int pa = a.id, pb = b.id;
  return OpAccess::make(a.g, "minimum", std::move(out), {pa, pb}, [pa, pb](Graph& g, int self) {
    const Tensor& go = OpAccess::node(g, self).grad;
    const Tensor& va = OpAccess::node(g, pa).value;
    const Tensor& vb = OpAccess::node(g, pb).value;
    if (OpAccess::node(g, pa).requires_grad) {
      Tensor& ga = OpAccess::grad_buf(g, pa);
      for (std::size_t i = 0; i < go.data.size(); ++i) {
        if (va.data[i] <= vb.data[i]) ga.data[i] += go.data[i];
      }
    }
    if (OpAccess::node(g, pb).requires_grad) {
      Tensor& gb = OpAccess::grad_buf(g, pb);
      for (std::size_t i = 0; i < go.data.size(); ++i) {
        if (va.data[i] > vb.data[i]) gb.data[i] += go.data[i];
      }
    }
  });
}

}  // namespace remb::ad
