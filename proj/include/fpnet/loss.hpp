#pragma once

#include "fpnet/model.hpp"

namespace fpnet {

// Boundary-emphasis weights w = 1 + 5 |box31(gt) - gt|. The 31x31 box mean
// (stride 1, radius 15) averages only in-bounds pixels. gt is (b,1,H,W) in
// [0,1]; the result carries no gradient.
template <typename T>
Tensor<T> weight_map(const Tensor<T>& gt);

// Per image: sum(w * bce(logit, gt)) / sum(w), stable logit form; averaged
// over the batch.
template <typename T>
Tensor<T> weighted_bce(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights);

// Per image: 1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1), p = sigmoid(logit);
// averaged over the batch.
template <typename T>
Tensor<T> weighted_iou(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights);

template <typename T>
struct MapLoss {
  Tensor<T> bce;
  Tensor<T> iou;
  Tensor<T> total;  // bce + iou
};

template <typename T>
MapLoss<T> map_loss(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights);

template <typename T>
struct LossBreakdown {
  MapLoss<T> s1, s2, s_output;
  Tensor<T> total;  // (l1 + l2) + l_output

  T l1() const { return s1.total.item(); }
  T l2() const { return s2.total.item(); }
  T l_output() const { return s_output.total.item(); }
  T value() const { return total.item(); }
};

template <typename T>
LossBreakdown<T> total_loss(const PredictionTriplet<T>& preds, const Tensor<T>& gt);

}  // namespace fpnet
