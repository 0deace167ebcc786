#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "scam/autodiff.hpp"

namespace scam {

/// Per-point masks from one (rec, pred, y) snapshot, all with y's shape.
/// m = (rec - pred)(rec - y); M = [m > 0]; M_lt = [|rec - pred| < |rec - y|].
struct MaskSet {
  Array m;
  Array M;
  Array M_lt;

  /// Points where the reconstruction replaces the label (M = 1, M_lt = 0).
  std::size_t reconstruction_corrected() const;
  std::size_t in_mask() const;
};

MaskSet compute_masks(const Array& rec, const Array& pred, const Array& y);

/// B x H -> B x S x H by repeating each row S times.
Var expand_series(const Var& x, std::size_t series);
Array expand_series(const Array& x, std::size_t series);

// Every loss below is a pointwise l1 form averaged over all points. When rec is
// B x S x H the predictions and labels must already be expanded to match, so the
// mean is also the average over the S candidates.
Var supervised_loss(const Var& pred, const Var& y);
Var reconstruction_loss(const Var& rec, const Var& y);
Var co_objective_loss(const Var& rec, const Var& pred, const Var& y);
/// |y - pred| on M = 0 plus 2(|rec - pred| M_lt + |rec - y| (1 - M_lt)) on M = 1.
/// The masks enter as constants.
Var scam_masked_loss(const Var& rec, const Var& pred, const Var& y, const MaskSet& masks);

/// Mean of per-candidate scalar losses.
Var aggregate_over_series(const std::vector<Var>& losses);
double aggregate_over_series(std::span<const double> losses);

/// |A| + |B| - |A - B| against its case form (2 min(|A|, |B|) if AB > 0 else 0).
double identity_discrepancy(double a, double b);
/// Largest pointwise gap across the whole chain: co-objective vs supervised plus
/// auxiliary term, and the auxiliary term vs its case and mask forms.
double loss_identity_check(const Array& rec, const Array& pred, const Array& y);

struct LossBreakdown {
  double rec_corrected = 0.0;   // mean 2|rec - y| (1 - M_lt) M
  double pred_corrected = 0.0;  // mean 2|rec - pred| M_lt M
  double sup_in_mask = 0.0;     // mean |y - pred| M
  double sup_out_mask = 0.0;    // mean |y - pred| (1 - M)
  double l_rec = 0.0;
  double l_pred = 0.0;
  double l_target = 0.0;

  /// The four components add up to the co-objective.
  double total() const { return rec_corrected + pred_corrected + sup_in_mask + sup_out_mask; }
  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double factor) const;
};

LossBreakdown loss_breakdown(const Array& rec, const Array& pred, const Array& y, const MaskSet& masks);

/// One sample per file: columns t,y,y_hat,y_tilde,m,M,M_lt.
void write_mask_dump(const std::filesystem::path& path, std::span<const double> y, std::span<const double> pred,
                     std::span<const double> rec, std::size_t t0);

}  // namespace scam
