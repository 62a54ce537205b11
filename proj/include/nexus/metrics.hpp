#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nexus/data.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

// Structural fidelity score. Re-extracts edges from the generated image and
// compares them with the reference edge map: a pixel counts as matched when
// the other map has an edge within `dilation` pixels (Chebyshev distance).
// F1 = 2pr/(p+r). Both maps empty scores 1, exactly one empty scores 0.
// Swapping the arguments swaps precision with recall, so the F1 itself is
// symmetric under the swap.
double edge_f1(const Tensor& generated, const Tensor& condition_edges,
               int64_t dilation = 1);
double edge_f1_maps(const Tensor& pred_map, const Tensor& ref_map,
                    int64_t dilation = 1);

// Prompt adherence score. The k-th color word of the prompt (base word or
// synonym) names the expected color of the k-th primitive. The mean generated
// color over the primitive's visible pixels is classified to the nearest of
// the 4 color prototypes; ties resolve to the lowest color index. Primitives
// beyond the prompt's color words are skipped; with nothing to score the
// result is 1 by convention.
double color_accuracy(const Tensor& generated, const Scene& scene,
                      const std::string& prompt);

// 64-dim pooled activations of a fixed, seed-pinned random conv net. Input
// [3,S,S] with S divisible by 8. The net never changes across runs, so
// distances are comparable within this codebase only.
Tensor eval_features(const Tensor& image);

// Frechet distance between Gaussians fitted to two feature matrices [N,d]
// (rows are samples, N >= 2, unbiased covariance):
//   |mu_a-mu_b|^2 + tr(Sa) + tr(Sb) - 2 tr((Sb^1/2 Sa Sb^1/2)^1/2)
// Matrix square roots go through a symmetric eigendecomposition with negative
// eigenvalues clamped to 0; the final value is clamped to be nonnegative.
double frechet_gaussian(const Tensor& feats_a, const Tensor& feats_b);

// frechet_gaussian over eval_features of two image sets.
double frechet_fixed_features(const std::vector<Tensor>& a,
                              const std::vector<Tensor>& b);

// Cyclic Jacobi eigendecomposition of a symmetric row-major d x d matrix.
// eigenvectors holds V with eigenvector k in column k: A = V diag(w) V^T.
void symmetric_eigen(const std::vector<double>& a, int64_t d,
                     std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors);

struct EvalReport {
  double edge_f1 = 0.0;
  double color_accuracy = 0.0;
  double frechet = 0.0;
  int64_t n = 0;
  std::string config_json = "{}";  // resolved settings echoed by the caller

  std::string to_json() const;
};

}  // namespace nexus
