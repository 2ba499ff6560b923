#include "map4ts/autograd.hpp"

#include <cmath>
#include <limits>

#include "map4ts/error.hpp"

namespace map4ts::ag {

std::size_t ParameterStore::add(const std::string& name, Mat value, bool trainable) {
  if (lookup_.count(name)) throw Error(ErrorCode::InvalidArgument, "duplicate parameter " + name);
  lookup_.emplace(name, names_.size());
  names_.push_back(name);
  grads_.push_back(Mat::Zero(value.rows(), value.cols()));
  values_.push_back(std::move(value));
  trainable_.push_back(trainable ? 1 : 0);
  return names_.size() - 1;
}

std::size_t ParameterStore::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw Error(ErrorCode::InvalidArgument, "no parameter " + name);
  return it->second;
}

bool ParameterStore::contains(const std::string& name) const { return lookup_.count(name) != 0; }

void ParameterStore::zero_grad() {
  for (auto& g : grads_) g.setZero();
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (trainable_[i]) n += static_cast<std::size_t>(values_[i].size());
  }
  return n;
}

std::size_t ParameterStore::total_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::uint64_t ParameterStore::hash_where(const std::function<bool(const std::string&)>& pick) const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!pick(names_[i])) continue;
    mix(names_[i].data(), names_[i].size());
    mix(values_[i].data(), sizeof(double) * static_cast<std::size_t>(values_[i].size()));
  }
  return h;
}

std::uint64_t ParameterStore::hash() const {
  return hash_where([](const std::string&) { return true; });
}

const Mat& Var::value() const { return tape->value(id); }
const Mat& Var::grad() const { return tape->grad(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

std::size_t Tape::push(Mat value, bool requires_grad, std::function<void()> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Mat& Tape::grad_mut(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Mat value) { return Var{this, push(std::move(value), false, {})}; }

Var Tape::leaf(Mat value, bool requires_grad) {
  return Var{this, push(std::move(value), requires_grad, {})};
}

Var Tape::param(const ParameterStore& store, std::size_t index) {
  if (store_ && store_ != &store) {
    throw Error(ErrorCode::InvalidArgument, "tape already bound to another parameter store");
  }
  store_ = &store;
  auto it = param_nodes_.find(index);
  if (it != param_nodes_.end()) return Var{this, it->second};
  const std::size_t id = push(store.value(index), store.trainable(index), {});
  param_nodes_.emplace(index, id);
  return Var{this, id};
}

void Tape::backward(Var out) {
  if (out.rows() != 1 || out.cols() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar output");
  }
  if (!requires_grad(out.id)) return;
  grad_mut(out.id)(0, 0) += 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward();
  }
}

void Tape::accumulate(ParameterStore& store) const {
  if (store_ && store_ != &store) {
    throw Error(ErrorCode::InvalidArgument, "tape bound to another parameter store");
  }
  for (const auto& [index, node] : param_nodes_) {
    const Node& n = nodes_[node];
    if (n.grad.size() != 0) store.grad(index) += n.grad;
  }
}

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error(ErrorCode::InvalidArgument, "variables on different tapes");
}

void require_shape(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

}  // namespace

namespace {

// Registers an op whose backward receives the output gradient.
template <class F>
Var record(Tape* t, Mat value, bool rg, F&& backward) {
  const std::size_t out = t->next_id();
  t->push(std::move(value), rg, [t, out, f = std::forward<F>(backward)]() { f(t->grad(out)); });
  return Var{t, out};
}

template <class Expr>
void accum(Var v, const Expr& g) {
  if (v.requires_grad()) v.tape->grad_mut(v.id) += g;
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul inner dimensions differ");
  return record(a.tape, a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                [a, b](const Mat& g) {
                  if (a.requires_grad()) accum(a, g * b.value().transpose());
                  if (b.requires_grad()) accum(b, a.value().transpose() * g);
                });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add shapes differ");
  return record(a.tape, a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                [a, b](const Mat& g) {
                  accum(a, g);
                  accum(b, g);
                });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub shapes differ");
  return record(a.tape, a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                [a, b](const Mat& g) {
                  accum(a, g);
                  accum(b, -g);
                });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row needs a matching 1xN row");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return record(a.tape, std::move(out), a.requires_grad() || row.requires_grad(),
                [a, row](const Mat& g) {
                  accum(a, g);
                  if (row.requires_grad()) accum(row, g.colwise().sum());
                });
}

Var mul_scalar(Var a, double s) {
  return record(a.tape, a.value() * s, a.requires_grad(), [a, s](const Mat& g) { accum(a, g * s); });
}

double gelu_value(double x) noexcept {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

Var gelu(Var a) {
  Mat out = a.value().unaryExpr([](double x) { return gelu_value(x); });
  return record(a.tape, std::move(out), a.requires_grad(), [a](const Mat& g) {
    constexpr double c = 0.7978845608028654;
    Mat d = a.value().unaryExpr([](double x) {
      const double u = c * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    });
    accum(a, g.cwiseProduct(d));
  });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Eigen::Index n = x.cols();
  require_shape(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
                "layernorm parameters must be 1xN");
  const Mat& xv = x.value();
  Mat xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return record(x.tape, std::move(out), rg, [x, gamma, beta, xhat, inv_std](const Mat& g) {
    if (gamma.requires_grad()) accum(gamma, g.cwiseProduct(xhat).colwise().sum());
    if (beta.requires_grad()) accum(beta, g.colwise().sum());
    if (!x.requires_grad()) return;
    Mat dxhat = g;
    dxhat.array().rowwise() *= gamma.value().row(0).array();
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double m1 = dxhat.row(r).mean();
      const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
      dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
    }
    accum(x, dx);
  });
}

Var attention(Var q, Var k, Var v, const AttentionOptions& opts) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Eigen::Index m = q.rows(), n = k.rows(), d = q.cols();
  const auto heads = static_cast<Eigen::Index>(opts.heads);
  if (heads < 1 || d % heads != 0) {
    throw Error(ErrorCode::DimMismatch, "width " + std::to_string(d) + " not divisible by " +
                                            std::to_string(opts.heads) + " heads");
  }
  require_shape(k.cols() == d && v.cols() == d && v.rows() == n, "attention key/value shapes");
  require_shape(!opts.causal || m == n, "causal attention needs square scores");
  require_shape(opts.key_mask.empty() || static_cast<Eigen::Index>(opts.key_mask.size()) == n,
                "key mask length");
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const Mat& qv = q.value();
  const Mat& kv = k.value();
  const Mat& vv = v.value();

  std::vector<Mat> probs(static_cast<std::size_t>(heads));
  Mat out(m, d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    Mat s = qv.middleCols(h * dk, dk) * kv.middleCols(h * dk, dk).transpose() * scale;
    Mat& p = probs[static_cast<std::size_t>(h)];
    p = Mat::Zero(m, n);
    for (Eigen::Index i = 0; i < m; ++i) {
      const Eigen::Index width = opts.causal ? std::min(i + 1, n) : n;
      auto srow = s.row(i).head(width).array();
      if (!opts.key_mask.empty()) {
        for (Eigen::Index j = 0; j < width; ++j) {
          if (opts.key_mask[static_cast<std::size_t>(j)]) srow(j) = -std::numeric_limits<double>::infinity();
        }
      }
      const double mx = srow.maxCoeff();
      if (!std::isfinite(mx)) continue;  // no admissible key: zero row
      auto prow = p.row(i).head(width).array();
      prow = (srow - mx).exp();
      if (!opts.key_mask.empty()) {
        for (Eigen::Index j = 0; j < width; ++j) {
          if (opts.key_mask[static_cast<std::size_t>(j)]) prow(j) = 0.0;
        }
      }
      prow /= prow.sum();
    }
    out.middleCols(h * dk, dk) = p * vv.middleCols(h * dk, dk);
  }
  if (opts.record) *opts.record = probs;
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  if (!rg || !q.tape->grad_enabled()) probs.clear();
  return record(q.tape, std::move(out), rg, [q, k, v, probs, dk, heads, scale](const Mat& g) {
    Mat dq = Mat::Zero(q.rows(), q.cols());
    Mat dkm = Mat::Zero(k.rows(), k.cols());
    Mat dv = Mat::Zero(v.rows(), v.cols());
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Mat& p = probs[static_cast<std::size_t>(h)];
      const auto gh = g.middleCols(h * dk, dk);
      Mat dp = gh * v.value().middleCols(h * dk, dk).transpose();
      dv.middleCols(h * dk, dk) += p.transpose() * gh;
      Eigen::VectorXd rowdot = p.cwiseProduct(dp).rowwise().sum();
      Mat ds = p.cwiseProduct(dp - rowdot.replicate(1, dp.cols())) * scale;
      dq.middleCols(h * dk, dk) += ds * k.value().middleCols(h * dk, dk);
      dkm.middleCols(h * dk, dk) += ds.transpose() * q.value().middleCols(h * dk, dk);
    }
    accum(q, dq);
    accum(k, dkm);
    accum(v, dv);
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw Error(ErrorCode::InvalidArgument, "token id " + std::to_string(ids[i]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return record(table.tape, std::move(out), table.requires_grad(), [table, ids](const Mat& g) {
    Mat& dt = table.tape->grad_mut(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var rows(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "row slice out of range");
  return record(a.tape, a.value().middleRows(start, count), a.requires_grad(),
                [a, start, count](const Mat& g) {
                  a.tape->grad_mut(a.id).middleRows(start, count) += g;
                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat of nothing");
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    require_shape(p.cols() == parts.front().cols(), "concat widths differ");
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  Mat out(total, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return record(parts.front().tape, std::move(out), rg, [parts](const Mat& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) accum(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

Var shift_rows(Var a, Eigen::Index shift) {
  const Eigen::Index n = a.rows();
  Mat out = Mat::Zero(n, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = i - shift;
    if (src >= 0 && src < n) out.row(i) = a.value().row(src);
  }
  return record(a.tape, std::move(out), a.requires_grad(), [a, shift, n](const Mat& g) {
    Mat& da = a.tape->grad_mut(a.id);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index src = i - shift;
      if (src >= 0 && src < n) da.row(src) += g.row(i);
    }
  });
}

Var max_rows(Var a) {
  require_shape(a.rows() >= 1, "max over zero rows");
  const Mat& av = a.value();
  Mat out(1, av.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(av.cols()), 0);
  for (Eigen::Index c = 0; c < av.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < av.rows(); ++r) {
      if (av(r, c) > av(best, c)) best = r;
    }
    arg[static_cast<std::size_t>(c)] = best;
    out(0, c) = av(best, c);
  }
  return record(a.tape, std::move(out), a.requires_grad(), [a, arg](const Mat& g) {
    Mat& da = a.tape->grad_mut(a.id);
    for (std::size_t c = 0; c < arg.size(); ++c) {
      da(arg[c], static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c));
    }
  });
}

Var reshape(Var a, Eigen::Index r, Eigen::Index c) {
  require_shape(r * c == a.value().size(), "reshape changes the element count");
  Mat out = Eigen::Map<const Mat>(a.value().data(), r, c);
  const Eigen::Index ar = a.rows(), ac = a.cols();
  return record(a.tape, std::move(out), a.requires_grad(), [a, ar, ac](const Mat& g) {
    accum(a, Eigen::Map<const Mat>(g.data(), ar, ac));
  });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return record(a.tape, std::move(out), a.requires_grad(), [a](const Mat& g) {
    a.tape->grad_mut(a.id).array() += g(0, 0);
  });
}

Var mse(Var pred, const Mat& target) {
  require_shape(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse shapes differ");
  const Mat diff = pred.value() - target;
  const double n = static_cast<double>(diff.size());
  Mat out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return record(pred.tape, std::move(out), pred.requires_grad(), [pred, diff, n](const Mat& g) {
    accum(pred, diff * (2.0 * g(0, 0) / n));
  });
}

}  // namespace map4ts::ag
