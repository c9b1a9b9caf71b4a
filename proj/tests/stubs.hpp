// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Hand-written denoisers with known outputs for the guidance, sampling and
// loss tests.

#pragma once

#include <memory>
#include <utility>

#include "diffapo/diffusion.hpp"

namespace diffapo::testing {

/// Returns `cond`, `uncond` or `skip` for every row depending on the query.
class ConstantDenoiser final : public diffusion::Denoiser {
 public:
  ConstantDenoiser(nd::Tensor cond, nd::Tensor uncond, nd::Tensor skip)
      : cond_(std::move(cond)), uncond_(std::move(uncond)), skip_(std::move(skip)) {}

  nd::Var record(nd::Tape& tape, const diffusion::Batch& batch, diffusion::Pass pass, bool) const override {
    nd::Tensor out(batch.x_t.shape());
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      const nd::Tensor& src =
          batch.c[r] == diffusion::kNullCondition ? uncond_ : (pass == diffusion::Pass::skip ? skip_ : cond_);
      for (std::size_t j = 0; j < src.size(); ++j) out.at(r, j) = src[j];
    }
    return tape.constant(std::move(out));
  }
  nd::ParamSet& params() override { return params_; }
  const nd::ParamSet& params() const override { return params_; }
  std::unique_ptr<diffusion::Denoiser> clone() const override { return std::make_unique<ConstantDenoiser>(*this); }

 private:
  nd::Tensor cond_, uncond_, skip_;
  nd::ParamSet params_;
};

/// Always predicts the same rows x dim tensor, e.g. the noise that was injected.
class FixedDenoiser final : public diffusion::Denoiser {
 public:
  explicit FixedDenoiser(nd::Tensor out) : out_(std::move(out)) {}

  nd::Var record(nd::Tape& tape, const diffusion::Batch&, diffusion::Pass, bool) const override {
    return tape.constant(out_);
  }
  nd::ParamSet& params() override { return params_; }
  const nd::ParamSet& params() const override { return params_; }
  std::unique_ptr<diffusion::Denoiser> clone() const override { return std::make_unique<FixedDenoiser>(*this); }

 private:
  nd::Tensor out_;
  nd::ParamSet params_;
};

}  // namespace diffapo::testing
