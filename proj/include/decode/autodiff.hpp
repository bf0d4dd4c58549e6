#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace decode::ad {

using Matrix = Eigen::MatrixXd;

class Graph;

// Handle to a node on the tape. Values are dense 64-bit matrices; scalars are
// 1x1, row vectors 1xn.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Append-only tape; creation order is a topological order, so backward runs
// the closures in reverse id order.
class Graph {
 public:
  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Registers an arbitrary node; `back` receives the graph and the node id
  // and must accumulate into the parents' grads. Exposed so callers can add
  // ops (and tests can install deliberately wrong rules).
  Var custom(Matrix value, const std::vector<Var>& parents,
             std::function<void(Graph&, int)> back);

  // Reverse accumulation from a scalar loss; each reachable leaf's grad ends
  // up as d(loss)/d(leaf). Throws on a non-scalar argument.
  void backward(Var loss);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  // Gradient buffer, zero-allocated on first touch.
  Matrix& grad_ref(int id);
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  const std::vector<int>& parents(int id) const {
    return nodes_[static_cast<std::size_t>(id)].parents;
  }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Matrix value;
    Matrix grad;  // empty until touched
    std::vector<int> parents;
    std::function<void(Graph&, int)> back;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---- primitives ------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_bias(Var a, Var bias_row);  // the only broadcast: [m x n] + [1 x n]
Var scale(Var a, double s);
Var add_const(Var a, const Matrix& m);        // m carries no gradient
Var cwise_mul_const(Var a, const Matrix& m);  // dropout masks etc.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var relu(Var a);
Var gelu(Var a);  // tanh approximation; smooth, so finite differences stay clean
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain_row, Var bias_row, double eps = 1e-5);
Var embedding_lookup(Var table, const std::vector<int>& ids);
Var gather_rows(Var a, const std::vector<int>& rows);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index len);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index len);
// Mean token-level cross entropy over rows whose target != ignore_id.
Var cross_entropy(Var logits, const std::vector<int>& target_ids, int ignore_id = 0);
// Binary cross entropy on a 1x1 logit, numerically stable.
Var bce_with_logit(Var logit, double label);

// ---- parameters and optimizer ----------------------------------------------

using ParamStore = std::map<std::string, Matrix>;
using GradMap = std::map<std::string, Matrix>;

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
  long long step = 0;
};

// Standard bias-corrected Adam update, in place. lr overrides config.lr when
// positive (for schedules).
void adam_step(ParamStore& params, const GradMap& grads, AdamState& state, double lr = -1.0);

// Scales grads so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(GradMap& grads, double max_norm);

// Central-difference check of analytic gradients. Samples up to
// sample_per_tensor coordinates per tensor (all when the tensor is smaller)
// and returns the max over samples of |analytic - numeric| /
// max(1e-8, |analytic| + |numeric|).
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Eigen::Index worst_index = 0;
};
GradCheckReport finite_diff_check(ParamStore& params,
                                  const std::function<double(const ParamStore&)>& loss_fn,
                                  const GradMap& analytic_grads, double eps = 1e-5,
                                  int sample_per_tensor = 64, std::uint64_t seed = 1234);

}  // namespace decode::ad
