#include "scam/scam_loss.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "scam/errors.hpp"

namespace scam {

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
  }
}

}  // namespace

std::size_t MaskSet::reconstruction_corrected() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < M.size(); ++i) n += (M[i] == 1.0 && M_lt[i] == 0.0) ? 1 : 0;
  return n;
}

std::size_t MaskSet::in_mask() const {
  std::size_t n = 0;
  for (double v : M.data()) n += v == 1.0 ? 1 : 0;
  return n;
}

MaskSet compute_masks(const Array& rec, const Array& pred, const Array& y) {
  require_same(rec.shape(), y.shape(), "compute_masks");
  require_same(pred.shape(), y.shape(), "compute_masks");
  if (!rec.all_finite() || !pred.all_finite() || !y.all_finite()) {
    throw ContractError("compute_masks: non-finite input");
  }
  MaskSet s{Array(y.shape()), Array(y.shape()), Array(y.shape())};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = rec[i] - pred[i];
    const double b = rec[i] - y[i];
    s.m[i] = a * b;
    s.M[i] = s.m[i] > 0.0 ? 1.0 : 0.0;
    s.M_lt[i] = std::fabs(a) < std::fabs(b) ? 1.0 : 0.0;
  }
  return s;
}

Var expand_series(const Var& x, std::size_t series) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("expand_series expects B x H");
  Var row = reshape(x, {s[0], 1, s[1]});
  if (series == 1) return row;
  return concat(std::vector<Var>(series, row), 1);
}

Array expand_series(const Array& x, std::size_t series) {
  if (x.rank() != 2) throw DimensionError("expand_series expects B x H");
  const std::size_t b = x.dim(0), h = x.dim(1);
  Array out({b, series, h});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < series; ++s)
      for (std::size_t t = 0; t < h; ++t) out[(i * series + s) * h + t] = x.at(i, t);
  return out;
}

Var supervised_loss(const Var& pred, const Var& y) {
  require_same(pred.shape(), y.shape(), "supervised_loss");
  return mean(abs(sub(y, pred)));
}

Var reconstruction_loss(const Var& rec, const Var& y) {
  require_same(rec.shape(), y.shape(), "reconstruction_loss");
  return mean(abs(sub(rec, y)));
}

Var co_objective_loss(const Var& rec, const Var& pred, const Var& y) {
  require_same(rec.shape(), y.shape(), "co_objective_loss");
  require_same(pred.shape(), y.shape(), "co_objective_loss");
  return mean(add(abs(sub(rec, y)), abs(sub(rec, pred))));
}

Var scam_masked_loss(const Var& rec, const Var& pred, const Var& y, const MaskSet& masks) {
  require_same(rec.shape(), y.shape(), "scam_masked_loss");
  require_same(pred.shape(), y.shape(), "scam_masked_loss");
  require_same(masks.M.shape(), y.shape(), "scam_masked_loss masks");
  Tape& tape = *y.tape();
  Array out_mask(y.shape()), pred_w(y.shape()), rec_w(y.shape());
  for (std::size_t i = 0; i < out_mask.size(); ++i) {
    out_mask[i] = 1.0 - masks.M[i];
    pred_w[i] = 2.0 * masks.M_lt[i] * masks.M[i];
    rec_w[i] = 2.0 * (1.0 - masks.M_lt[i]) * masks.M[i];
  }
  Var target = mul(abs(sub(y, pred)), tape.constant(std::move(out_mask)));
  Var to_pred = mul(abs(sub(rec, pred)), tape.constant(std::move(pred_w)));
  Var to_label = mul(abs(sub(rec, y)), tape.constant(std::move(rec_w)));
  return mean(add(target, add(to_pred, to_label)));
}

Var aggregate_over_series(const std::vector<Var>& losses) {
  if (losses.empty()) throw ContractError("aggregate_over_series needs at least one candidate");
  Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, 1.0 / static_cast<double>(losses.size()));
}

double aggregate_over_series(std::span<const double> losses) {
  if (losses.empty()) throw ContractError("aggregate_over_series needs at least one candidate");
  double s = 0.0;
  for (double v : losses) s += v;
  return s / static_cast<double>(losses.size());
}

double identity_discrepancy(double a, double b) {
  const double lhs = std::fabs(a) + std::fabs(b) - std::fabs(a - b);
  const double rhs = a * b > 0.0 ? 2.0 * std::min(std::fabs(a), std::fabs(b)) : 0.0;
  return std::fabs(lhs - rhs);
}

double loss_identity_check(const Array& rec, const Array& pred, const Array& y) {
  const MaskSet masks = compute_masks(rec, pred, y);
  double worst = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = rec[i] - pred[i];
    const double b = rec[i] - y[i];
    const double sup = std::fabs(y[i] - pred[i]);
    const double co = std::fabs(a) + std::fabs(b);
    const double aux = std::fabs(a) + std::fabs(b) - std::fabs(a - b);
    const double cases = masks.m[i] > 0.0 ? 2.0 * std::min(std::fabs(a), std::fabs(b)) : 0.0;
    const double mask_form = 2.0 * (std::fabs(a) * masks.M_lt[i] + std::fabs(b) * (1.0 - masks.M_lt[i])) * masks.M[i];
    worst = std::max({worst, std::fabs(co - (sup + mask_form)), identity_discrepancy(a, b), std::fabs(aux - cases),
                      std::fabs(cases - mask_form)});
  }
  return worst;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  rec_corrected += o.rec_corrected;
  pred_corrected += o.pred_corrected;
  sup_in_mask += o.sup_in_mask;
  sup_out_mask += o.sup_out_mask;
  l_rec += o.l_rec;
  l_pred += o.l_pred;
  l_target += o.l_target;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double f) const {
  return {rec_corrected * f, pred_corrected * f, sup_in_mask * f, sup_out_mask * f,
          l_rec * f,         l_pred * f,         l_target * f};
}

LossBreakdown loss_breakdown(const Array& rec, const Array& pred, const Array& y, const MaskSet& masks) {
  require_same(rec.shape(), y.shape(), "loss_breakdown");
  require_same(pred.shape(), y.shape(), "loss_breakdown");
  require_same(masks.M.shape(), y.shape(), "loss_breakdown masks");
  LossBreakdown b;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = std::fabs(rec[i] - pred[i]);
    const double r = std::fabs(rec[i] - y[i]);
    const double t = std::fabs(y[i] - pred[i]);
    b.rec_corrected += 2.0 * r * (1.0 - masks.M_lt[i]) * masks.M[i];
    b.pred_corrected += 2.0 * a * masks.M_lt[i] * masks.M[i];
    b.sup_in_mask += t * masks.M[i];
    b.sup_out_mask += t * (1.0 - masks.M[i]);
    b.l_rec += r;
    b.l_pred += a;
    b.l_target += t;
  }
  return b.scaled(1.0 / static_cast<double>(y.size()));
}

void write_mask_dump(const std::filesystem::path& path, std::span<const double> y, std::span<const double> pred,
                     std::span<const double> rec, std::size_t t0) {
  if (y.size() != pred.size() || y.size() != rec.size()) throw DimensionError("write_mask_dump: length mismatch");
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "t,y,y_hat,y_tilde,m,M,M_lt\n" << std::setprecision(17);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = rec[i] - pred[i];
    const double b = rec[i] - y[i];
    const double m = a * b;
    out << t0 + i << ',' << y[i] << ',' << pred[i] << ',' << rec[i] << ',' << m << ',' << (m > 0.0 ? 1 : 0) << ','
        << (std::fabs(a) < std::fabs(b) ? 1 : 0) << '\n';
  }
}

}  // namespace scam
