#include "decode/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "decode/errors.hpp"
#include "decode/rng.hpp"

namespace decode::ad {

namespace {

void check_same_graph(Var a, Var b, const char* op) {
  if (a.graph() != b.graph())
    throw InvariantError(std::string(op) + ": operands belong to different graphs");
}

[[noreturn]] void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes [" + std::to_string(a.rows()) + "x" +
                   std::to_string(a.cols()) + "] and [" + std::to_string(b.rows()) + "x" +
                   std::to_string(b.cols()) + "]");
}

}  // namespace

const Matrix& Var::value() const { return graph_->value(id_); }
const Matrix& Var::grad() const { return graph_->grad_ref(id_); }

Var Graph::leaf(Matrix value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::custom(Matrix value, const std::vector<Var>& parents,
                  std::function<void(Graph&, int)> back) {
  Node node;
  node.value = std::move(value);
  node.parents.reserve(parents.size());
  for (Var p : parents) {
    if (p.graph() != this) throw InvariantError("custom: parent from another graph");
    node.parents.push_back(p.id());
    node.needs_grad = node.needs_grad || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
  }
  if (node.needs_grad) node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Graph::grad_ref(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.grad.size() == 0) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) throw InvariantError("backward: loss from another graph");
  const Matrix& v = value(loss.id());
  if (v.rows() != 1 || v.cols() != 1)
    throw ShapeError("backward: loss must be a 1x1 scalar, got [" + std::to_string(v.rows()) +
                     "x" + std::to_string(v.cols()) + "]");
  grad_ref(loss.id())(0, 0) = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad || !node.back || node.grad.size() == 0) continue;
    node.back(*this, id);
  }
}

// ---- primitives ------------------------------------------------------------

Var add(Var a, Var b) {
  check_same_graph(a, b, "add");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("add", a.value(), b.value());
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  return g.custom(a.value() + b.value(), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    if (g.needs_grad(ia)) g.grad_ref(ia) += d;
    if (g.needs_grad(ib)) g.grad_ref(ib) += d;
  });
}

Var sub(Var a, Var b) {
  check_same_graph(a, b, "sub");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("sub", a.value(), b.value());
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  return g.custom(a.value() - b.value(), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    if (g.needs_grad(ia)) g.grad_ref(ia) += d;
    if (g.needs_grad(ib)) g.grad_ref(ib) -= d;
  });
}

Var add_bias(Var a, Var bias_row) {
  check_same_graph(a, bias_row, "add_bias");
  if (bias_row.rows() != 1 || bias_row.cols() != a.cols())
    shape_fail("add_bias", a.value(), bias_row.value());
  Graph& g = *a.graph();
  const int ia = a.id(), ib = bias_row.id();
  Matrix out = a.value();
  out.rowwise() += bias_row.value().row(0);
  return g.custom(std::move(out), {a, bias_row}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    if (g.needs_grad(ia)) g.grad_ref(ia) += d;
    if (g.needs_grad(ib)) g.grad_ref(ib) += d.colwise().sum();
  });
}

Var scale(Var a, double s) {
  Graph& g = *a.graph();
  const int ia = a.id();
  return g.custom(a.value() * s, {a}, [ia, s](Graph& g, int self) {
    g.grad_ref(ia) += s * g.grad_ref(self);
  });
}

Var add_const(Var a, const Matrix& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols()) shape_fail("add_const", a.value(), m);
  Graph& g = *a.graph();
  const int ia = a.id();
  return g.custom(a.value() + m, {a}, [ia](Graph& g, int self) {
    g.grad_ref(ia) += g.grad_ref(self);
  });
}

Var cwise_mul_const(Var a, const Matrix& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols()) shape_fail("cwise_mul_const", a.value(), m);
  Graph& g = *a.graph();
  const int ia = a.id();
  Matrix out = a.value().cwiseProduct(m);
  Matrix mask = m;
  return g.custom(std::move(out), {a},
                  [ia, mask = std::move(mask)](Graph& g, int self) {
                    g.grad_ref(ia) += g.grad_ref(self).cwiseProduct(mask);
                  });
}

Var matmul(Var a, Var b) {
  check_same_graph(a, b, "matmul");
  if (a.cols() != b.rows()) shape_fail("matmul", a.value(), b.value());
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  return g.custom(a.value() * b.value(), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    if (g.needs_grad(ia)) g.grad_ref(ia).noalias() += d * g.value(ib).transpose();
    if (g.needs_grad(ib)) g.grad_ref(ib).noalias() += g.value(ia).transpose() * d;
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_graph(a, b, "matmul_nt");
  if (a.cols() != b.cols()) shape_fail("matmul_nt", a.value(), b.value());
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  return g.custom(a.value() * b.value().transpose(), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    if (g.needs_grad(ia)) g.grad_ref(ia).noalias() += d * g.value(ib);
    if (g.needs_grad(ib)) g.grad_ref(ib).noalias() += d.transpose() * g.value(ia);
  });
}

Var relu(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  return g.custom(a.value().cwiseMax(0.0), {a}, [ia](Graph& g, int self) {
    const Matrix& x = g.value(ia);
    g.grad_ref(ia) += g.grad_ref(self).cwiseProduct(
        (x.array() > 0.0).cast<double>().matrix());
  });
}

namespace {
constexpr double kGeluAlpha = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluBeta = 0.044715;
}  // namespace

Var gelu(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  const Matrix& x = a.value();
  Matrix inner = kGeluAlpha * (x.array() + kGeluBeta * x.array().cube()).matrix();
  Matrix t = inner.array().tanh().matrix();
  Matrix out = 0.5 * x.cwiseProduct((t.array() + 1.0).matrix());
  return g.custom(std::move(out), {a}, [ia, t = std::move(t)](Graph& g, int self) {
    const Matrix& x = g.value(ia);
    // d/dx [0.5 x (1 + tanh(u))] with u = alpha (x + beta x^3)
    Eigen::ArrayXXd sech2 = 1.0 - t.array().square();
    Eigen::ArrayXXd du = kGeluAlpha * (1.0 + 3.0 * kGeluBeta * x.array().square());
    Eigen::ArrayXXd dgelu = 0.5 * (1.0 + t.array()) + 0.5 * x.array() * sech2 * du;
    g.grad_ref(ia) += g.grad_ref(self).cwiseProduct(dgelu.matrix());
  });
}

Var softmax_rows(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const auto row = a.value().row(r);
    const double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp();
    long double z = 0.0L;  // extended accumulator keeps the sum near 1 ulp
    for (Eigen::Index c = 0; c < e.size(); ++c) z += e(c);
    y.row(r) = e / static_cast<double>(z);
  }
  return g.custom(std::move(y), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad_ref(self);
    Matrix& da = g.grad_ref(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = d.row(r).cwiseProduct(y.row(r)).sum();
      da.row(r) += y.row(r).cwiseProduct(d.row(r).array().matrix() -
                                         Eigen::RowVectorXd::Constant(y.cols(), dot));
    }
  });
}

Var layer_norm(Var x, Var gain_row, Var bias_row, double eps) {
  check_same_graph(x, gain_row, "layer_norm");
  check_same_graph(x, bias_row, "layer_norm");
  if (gain_row.rows() != 1 || gain_row.cols() != x.cols())
    shape_fail("layer_norm", x.value(), gain_row.value());
  if (bias_row.rows() != 1 || bias_row.cols() != x.cols())
    shape_fail("layer_norm", x.value(), bias_row.value());
  Graph& g = *x.graph();
  const int ix = x.id(), igain = gain_row.id(), ibias = bias_row.id();
  const Eigen::Index n = x.cols();

  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    long double sum = 0.0L;
    for (Eigen::Index c = 0; c < n; ++c) sum += row(c);
    const double mu = static_cast<double>(sum / n);
    long double sq = 0.0L;
    for (Eigen::Index c = 0; c < n; ++c) {
      const long double d = row(c) - mu;
      sq += d * d;
    }
    const double var = static_cast<double>(sq / n);
    const double is = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu).matrix() * is;
    inv_std(r) = is;
  }
  Matrix out = xhat;
  out.array().rowwise() *= gain_row.value().row(0).array();
  out.rowwise() += bias_row.value().row(0);

  return g.custom(std::move(out), {x, gain_row, bias_row},
                  [ix, igain, ibias, xhat = std::move(xhat), inv_std = std::move(inv_std),
                   n](Graph& g, int self) {
                    const Matrix& d = g.grad_ref(self);
                    const auto gain = g.value(igain).row(0);
                    if (g.needs_grad(igain))
                      g.grad_ref(igain) += d.cwiseProduct(xhat).colwise().sum();
                    if (g.needs_grad(ibias)) g.grad_ref(ibias) += d.colwise().sum();
                    if (!g.needs_grad(ix)) return;
                    Matrix& dx = g.grad_ref(ix);
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (Eigen::Index r = 0; r < d.rows(); ++r) {
                      const Eigen::RowVectorXd dxhat = d.row(r).cwiseProduct(gain);
                      const double mean_dxhat = dxhat.mean();
                      const double mean_dxhat_xhat =
                          dxhat.cwiseProduct(xhat.row(r)).sum() * inv_n;
                      dx.row(r) += inv_std(r) *
                                   (dxhat.array() - mean_dxhat -
                                    xhat.row(r).array() * mean_dxhat_xhat)
                                       .matrix();
                    }
                  });
}

Var embedding_lookup(Var table, const std::vector<int>& ids) {
  Graph& g = *table.graph();
  const int it = table.id();
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) +
                       " out of range for table with " + std::to_string(table.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return g.custom(std::move(out), {table}, [it, ids](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    Matrix& dt = g.grad_ref(it);
    for (std::size_t i = 0; i < ids.size(); ++i)
      dt.row(ids[i]) += d.row(static_cast<Eigen::Index>(i));
  });
}

Var gather_rows(Var a, const std::vector<int>& rows) {
  Graph& g = *a.graph();
  const int ia = a.id();
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  return g.custom(std::move(out), {a}, [ia, rows](Graph& g, int self) {
    const Matrix& d = g.grad_ref(self);
    Matrix& da = g.grad_ref(ia);
    for (std::size_t i = 0; i < rows.size(); ++i)
      da.row(rows[i]) += d.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Graph& g = *parts[0].graph();
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (p.graph() != &g) throw InvariantError("concat_cols: operands from different graphs");
    if (p.rows() != rows) shape_fail("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.id());
    widths.push_back(p.cols());
    at += p.cols();
  }
  return g.custom(std::move(out), parts,
                  [ids, widths](Graph& g, int self) {
                    const Matrix& d = g.grad_ref(self);
                    Eigen::Index at = 0;
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (g.needs_grad(ids[i]))
                        g.grad_ref(ids[i]) += d.middleCols(at, widths[i]);
                      at += widths[i];
                    }
                  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index len) {
  if (begin < 0 || len < 0 || begin + len > a.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + len) + ") out of " + std::to_string(a.cols()));
  Graph& g = *a.graph();
  const int ia = a.id();
  return g.custom(a.value().middleCols(begin, len), {a}, [ia, begin, len](Graph& g, int self) {
    g.grad_ref(ia).middleCols(begin, len) += g.grad_ref(self);
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index len) {
  if (begin < 0 || len < 0 || begin + len > a.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + len) + ") out of " + std::to_string(a.rows()));
  Graph& g = *a.graph();
  const int ia = a.id();
  return g.custom(a.value().middleRows(begin, len), {a}, [ia, begin, len](Graph& g, int self) {
    g.grad_ref(ia).middleRows(begin, len) += g.grad_ref(self);
  });
}

Var cross_entropy(Var logits, const std::vector<int>& target_ids, int ignore_id) {
  if (static_cast<Eigen::Index>(target_ids.size()) != logits.rows())
    throw ShapeError("cross_entropy: " + std::to_string(target_ids.size()) + " targets for " +
                     std::to_string(logits.rows()) + " logit rows");
  Graph& g = *logits.graph();
  const int il = logits.id();

  Matrix probs(logits.rows(), logits.cols());
  long double total = 0.0L;
  long long counted = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto row = logits.value().row(r);
    const double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp();
    long double z = 0.0L;
    for (Eigen::Index c = 0; c < e.size(); ++c) z += e(c);
    probs.row(r) = e / static_cast<double>(z);
    const int t = target_ids[static_cast<std::size_t>(r)];
    if (t == ignore_id) continue;
    if (t < 0 || t >= logits.cols())
      throw ShapeError("cross_entropy: target id " + std::to_string(t) + " out of range");
    total += std::log(static_cast<double>(z)) + m - row(t);
    ++counted;
  }
  if (counted == 0) throw ValidationError("cross_entropy: no non-ignored targets");
  Matrix loss(1, 1);
  loss(0, 0) = static_cast<double>(total / counted);

  return g.custom(std::move(loss), {logits},
                  [il, target_ids, ignore_id, probs = std::move(probs),
                   counted](Graph& g, int self) {
                    const double up = g.grad_ref(self)(0, 0) / static_cast<double>(counted);
                    Matrix& dl = g.grad_ref(il);
                    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                      const int t = target_ids[static_cast<std::size_t>(r)];
                      if (t == ignore_id) continue;
                      dl.row(r) += up * probs.row(r);
                      dl(r, t) -= up;
                    }
                  });
}

Var bce_with_logit(Var logit, double label) {
  if (logit.rows() != 1 || logit.cols() != 1)
    throw ShapeError("bce_with_logit: logit must be 1x1");
  Graph& g = *logit.graph();
  const int il = logit.id();
  const double z = logit.value()(0, 0);
  Matrix loss(1, 1);
  loss(0, 0) = std::max(z, 0.0) - label * z + std::log1p(std::exp(-std::abs(z)));
  return g.custom(std::move(loss), {logit}, [il, z, label](Graph& g, int self) {
    const double sig = 1.0 / (1.0 + std::exp(-z));
    g.grad_ref(il)(0, 0) += g.grad_ref(self)(0, 0) * (sig - label);
  });
}

// ---- optimizer --------------------------------------------------------------

void adam_step(ParamStore& params, const GradMap& grads, AdamState& state, double lr) {
  const AdamConfig& c = state.config;
  const double rate = lr > 0.0 ? lr : c.lr;
  if (rate <= 0.0) throw ValidationError("adam_step: learning rate must be > 0");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ShapeError("adam_step: missing gradient for " + name);
    const Matrix& g = git->second;
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError("adam_step: gradient shape mismatch for " + name);
    Matrix& m = state.m[name];
    Matrix& v = state.v[name];
    if (m.size() == 0) m = Matrix::Zero(p.rows(), p.cols());
    if (v.size() == 0) v = Matrix::Zero(p.rows(), p.cols());
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    p.array() -= rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

double clip_global_norm(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) g *= s;
  }
  return norm;
}

GradCheckReport finite_diff_check(ParamStore& params,
                                  const std::function<double(const ParamStore&)>& loss_fn,
                                  const GradMap& analytic_grads, double eps,
                                  int sample_per_tensor, std::uint64_t seed) {
  if (eps <= 0.0) throw ValidationError("finite_diff_check: eps must be > 0");
  GradCheckReport report;
  for (auto& [name, p] : params) {
    auto git = analytic_grads.find(name);
    if (git == analytic_grads.end())
      throw ShapeError("finite_diff_check: missing analytic gradient for " + name);
    const Matrix& g = git->second;
    const Eigen::Index n = p.size();
    // Largest-|analytic| coordinates first: they carry the most signal about
    // a wrong backward rule, and they avoid the near-zero-gradient regime
    // where the finite-difference quotient is pure truncation noise.
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    if (n > sample_per_tensor) {
      std::stable_sort(coords.begin(), coords.end(), [&](Eigen::Index a, Eigen::Index b) {
        return std::abs(*(g.data() + a)) > std::abs(*(g.data() + b));
      });
      coords.resize(static_cast<std::size_t>(sample_per_tensor));
    }
    (void)seed;
    for (Eigen::Index idx : coords) {
      double* cell = p.data() + idx;
      const double orig = *cell;
      *cell = orig + eps;
      const double up = loss_fn(params);
      *cell = orig - eps;
      const double down = loss_fn(params);
      *cell = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = *(g.data() + idx);
      const double rel = std::abs(analytic - numeric) /
                         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = idx;
      }
    }
  }
  return report;
}

}  // namespace decode::ad
