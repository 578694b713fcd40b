#pragma once

#include "dsd/model.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// The paper-form losses are plain sums of squared differences; training
// uses the per-element mean so the balance weights transfer across
// canvas sizes. Both forms are exposed.
enum class LossNorm {
  kUnnormalized,  // ||a - b||^2
  kPerElement,    // mean over all elements
};

inline double squared_error(const Tensor& a, const Tensor& b,
                            LossNorm norm = LossNorm::kUnnormalized) {
  if (!same_shape(a, b))
    throw ShapeError("squared_error: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return norm == LossNorm::kPerElement ? acc / static_cast<double>(a.numel()) : acc;
}

// Reconstruction loss over a pair of observations.
inline double loss_original(const Tensor& image_a, const Tensor& image_b, const Tensor& recon_a,
                            const Tensor& recon_b, LossNorm norm = LossNorm::kUnnormalized) {
  return squared_error(image_a, recon_a, norm) + squared_error(image_b, recon_b, norm);
}

// Same form, against the hybrid reconstructions obtained after swapping.
inline double loss_swap(const Tensor& image_a, const Tensor& image_b, const Tensor& hybrid_a,
                        const Tensor& hybrid_b, LossNorm norm = LossNorm::kUnnormalized) {
  return squared_error(image_a, hybrid_a, norm) + squared_error(image_b, hybrid_b, norm);
}

// Combination rules shared by the direct losses below and the trainer.
inline double primary_total(double original, double swap, double alpha) {
  return original + alpha * swap;
}

inline double unlabeled_total(double original, double dual, double beta) {
  return original + beta * dual;
}

struct PrimaryLossValue {
  double original = 0.0;
  double swap = 0.0;
  double total = 0.0;
};

struct DualLossValue {
  double original = 0.0;
  double dual = 0.0;
  double total = 0.0;
};

namespace detail {

inline Tensor as_rows(const Tensor& image, const ModelConfig& cfg) {
  if (image.rank() == 2) {
    if (image.shape[1] != cfg.input_dim())
      throw ShapeError("loss: row width " + std::to_string(image.shape[1]) +
                       " does not match model input " + std::to_string(cfg.input_dim()));
    return image;
  }
  if (static_cast<int>(image.numel()) != cfg.input_dim())
    throw ShapeError("loss: image size does not match model input");
  return flatten_image(image);
}

}  // namespace detail

// One encode -> swap(k) -> decode pass plus the plain reconstruction,
// sharing the encoder outputs between the two terms.
inline PrimaryLossValue loss_primary(const Tensor& image_a, const Tensor& image_b,
                                     const AutoencoderParams& params, const ModelConfig& cfg,
                                     int k, double alpha,
                                     LossNorm norm = LossNorm::kPerElement) {
  const Tensor rows_a = detail::as_rows(image_a, cfg);
  const Tensor rows_b = detail::as_rows(image_b, cfg);
  const Tensor code_a = encode_batch(rows_a, params, cfg);
  const Tensor code_b = encode_batch(rows_b, params, cfg);
  const Tensor recon_a = decode_batch(code_a, params, cfg);
  const Tensor recon_b = decode_batch(code_b, params, cfg);
  auto [hyb_a, hyb_b] = swap_part_rows(code_a, code_b, cfg.layout, k);
  const Tensor hybrid_a = decode_batch(hyb_a, params, cfg);
  const Tensor hybrid_b = decode_batch(hyb_b, params, cfg);
  PrimaryLossValue v;
  v.original = loss_original(rows_a, rows_b, recon_a, recon_b, norm);
  v.swap = loss_swap(rows_a, rows_b, hybrid_a, hybrid_b, norm);
  v.total = primary_total(v.original, v.swap, alpha);
  return v;
}

// The full dual pass: encode -> swap(k) -> decode -> encode -> swap
// back(k) -> decode, compared against the original inputs.
inline DualLossValue loss_dual(const Tensor& image_a, const Tensor& image_b,
                               const AutoencoderParams& params, const ModelConfig& cfg, int k,
                               double beta, LossNorm norm = LossNorm::kPerElement) {
  const Tensor rows_a = detail::as_rows(image_a, cfg);
  const Tensor rows_b = detail::as_rows(image_b, cfg);
  const Tensor code_a = encode_batch(rows_a, params, cfg);
  const Tensor code_b = encode_batch(rows_b, params, cfg);
  const Tensor recon_a = decode_batch(code_a, params, cfg);
  const Tensor recon_b = decode_batch(code_b, params, cfg);
  auto [hyb_a, hyb_b] = swap_part_rows(code_a, code_b, cfg.layout, k);
  const Tensor hybrid_a = decode_batch(hyb_a, params, cfg);
  const Tensor hybrid_b = decode_batch(hyb_b, params, cfg);
  const Tensor second_a = encode_batch(hybrid_a, params, cfg);
  const Tensor second_b = encode_batch(hybrid_b, params, cfg);
  auto [back_a, back_b] = swap_part_rows(second_a, second_b, cfg.layout, k);
  const Tensor final_a = decode_batch(back_a, params, cfg);
  const Tensor final_b = decode_batch(back_b, params, cfg);
  DualLossValue v;
  v.original = loss_original(rows_a, rows_b, recon_a, recon_b, norm);
  v.dual = squared_error(rows_a, final_a, norm) + squared_error(rows_b, final_b, norm);
  v.total = unlabeled_total(v.original, v.dual, beta);
  return v;
}

}  // namespace dsd
