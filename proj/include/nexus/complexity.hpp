#pragma once

#include <string>
#include <vector>

#include "nexus/adapter.hpp"

namespace nexus {

struct ComplexityRow {
  std::string name;
  int64_t params = 0;
  int64_t macs = 0;
};

// Closed-form accounting; nothing is instantiated. MACs count the
// multiply-accumulates of convolutions and attention matmuls (biases, norms
// and activations are free in this convention). GFLOPs = flops_per_mac * MACs.
struct ComplexityReport {
  std::vector<ComplexityRow> rows;
  int64_t total_params = 0;
  int64_t total_macs = 0;
  int64_t input_h = 0, input_w = 0;
  double flops_per_mac = 1.0;
  std::string config_echo;

  double gflops() const { return flops_per_mac * double(total_macs) / 1e9; }
  const ComplexityRow* find(const std::string& name) const;
  std::string to_text() const;
  std::string to_csv() const;  // header "layer,params,macs"
};

ComplexityReport count_params(const AdapterConfig& cfg, int64_t d_text);
ComplexityReport count_flops(const AdapterConfig& cfg, int64_t h, int64_t w,
                             int64_t d_text, int64_t n_ctx = 16,
                             double flops_per_mac = 1.0);

// Cost model of the published reference adapter this work compares against:
// 3x3 stem into the first stage, then four scales of two residual blocks
// {optional 1x1 channel map, 3x3, 1x1} with parameter-free pooling between
// scales. Used for the parameter-delta report.
ComplexityReport t2i_reference_count(int64_t h = 512, int64_t w = 512,
                                     double flops_per_mac = 1.0);

}  // namespace nexus
