#include "nexus/complexity.hpp"

#include <iomanip>
#include <sstream>

namespace nexus {

namespace {

int64_t conv_p(int64_t ci, int64_t co, int64_t k, int64_t g) {
  return co * (ci / g) * k * k + co;
}

int64_t conv_m(int64_t ci, int64_t co, int64_t k, int64_t ho, int64_t wo, int64_t g) {
  return co * ho * wo * (ci / g) * k * k;
}

struct Acc {
  ComplexityReport rep;
  void row(const std::string& name, int64_t params, int64_t macs) {
    rep.rows.push_back({name, params, macs});
    rep.total_params += params;
    rep.total_macs += macs;
  }
};

// h, w are the stage's feature extents; 0 means params-only accounting
void account_adapter(Acc& acc, const AdapterConfig& cfg, int64_t d_text,
                     int64_t n_ctx, std::vector<int64_t> heights,
                     std::vector<int64_t> widths) {
  bool with_macs = !heights.empty();
  int64_t in = cfg.entry_channels();
  for (int64_t k = 0; k < cfg.stages; ++k) {
    int64_t c = cfg.schedule[size_t(k)];
    int64_t da = cfg.d_attn_for(c);
    int64_t h = with_macs ? heights[size_t(k)] : 0;
    int64_t w = with_macs ? widths[size_t(k)] : 0;
    int64_t m = h * w;
    std::string p = "stage" + std::to_string(k + 1) + ".";
    if (cfg.variant == AdapterVariant::Prime) {
      acc.row(p + "conv3a", conv_p(in, c, 3, 1), conv_m(in, c, 3, h, w, 1));
      acc.row(p + "conv1a", conv_p(c, c, 1, 1), conv_m(c, c, 1, h, w, 1));
      acc.row(p + "conv3b", conv_p(c, c, 3, 1), conv_m(c, c, 3, h, w, 1));
      acc.row(p + "conv1b", conv_p(c, c, 1, 1), conv_m(c, c, 1, h, w, 1));
    } else {
      if (in != c)
        acc.row(p + "entry", conv_p(in, c, 1, 1), conv_m(in, c, 1, h, w, 1));
      acc.row(p + "dw1", conv_p(c, c, 3, cfg.groups), conv_m(c, c, 3, h, w, cfg.groups));
      acc.row(p + "pw1", conv_p(c, c, 1, 1), conv_m(c, c, 1, h, w, 1));
      acc.row(p + "pw2", conv_p(c, c, 1, 1), conv_m(c, c, 1, h, w, 1));
      acc.row(p + "dw2", conv_p(c, c, 3, cfg.groups), conv_m(c, c, 3, h, w, cfg.groups));
      acc.row(p + "pw3", conv_p(c, c, 1, 1), conv_m(c, c, 1, h, w, 1));
      acc.row(p + "pw4", conv_p(c, c, 1, 1), conv_m(c, c, 1, h, w, 1));
    }
    acc.row(p + "norm", 2 * c, 0);
    acc.row(p + "attn.wq", c * da + da, m * c * da);
    acc.row(p + "attn.wk", d_text * da + da, n_ctx * d_text * da);
    acc.row(p + "attn.wv", d_text * da + da, n_ctx * d_text * da);
    acc.row(p + "attn.scores", 0, m * n_ctx * da);
    acc.row(p + "attn.mix", 0, m * n_ctx * da);
    acc.row(p + "attn.wo", da * c + c, m * da * c);
    if (k + 1 < cfg.stages) {
      int64_t g = cfg.variant == AdapterVariant::Slim ? c : 1;
      int64_t ho = with_macs ? heights[size_t(k + 1)] : 0;
      int64_t wo = with_macs ? widths[size_t(k + 1)] : 0;
      acc.row("phi" + std::to_string(k + 1), conv_p(c, c, 3, g),
              conv_m(c, c, 3, ho, wo, g));
    }
    in = c;
  }
}

}  // namespace

const ComplexityRow* ComplexityReport::find(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return &r;
  return nullptr;
}

std::string ComplexityReport::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(24) << "layer" << std::right << std::setw(14)
     << "params" << std::setw(16) << "macs" << "\n";
  for (const auto& r : rows)
    os << std::left << std::setw(24) << r.name << std::right << std::setw(14)
       << r.params << std::setw(16) << r.macs << "\n";
  os << std::left << std::setw(24) << "total" << std::right << std::setw(14)
     << total_params << std::setw(16) << total_macs << "\n";
  if (input_h > 0) {
    os << "input " << input_h << "x" << input_w << ", " << flops_per_mac
       << " flop/mac: " << std::fixed << std::setprecision(3) << gflops()
       << " GFLOPs, params " << std::setprecision(2)
       << double(total_params) / 1e6 << "M\n";
  } else {
    os << "params " << std::fixed << std::setprecision(2)
       << double(total_params) / 1e6 << "M\n";
  }
  return os.str();
}

std::string ComplexityReport::to_csv() const {
  std::ostringstream os;
  os << "layer,params,macs\n";
  for (const auto& r : rows) os << r.name << "," << r.params << "," << r.macs << "\n";
  os << "total," << total_params << "," << total_macs << "\n";
  return os.str();
}

ComplexityReport count_params(const AdapterConfig& cfg, int64_t d_text) {
  cfg.validate();
  Acc acc;
  account_adapter(acc, cfg, d_text, 16, {}, {});
  acc.rep.config_echo = cfg.to_json();
  return acc.rep;
}

ComplexityReport count_flops(const AdapterConfig& cfg, int64_t h, int64_t w,
                             int64_t d_text, int64_t n_ctx, double flops_per_mac) {
  std::vector<Shape> shapes = adapter_output_shapes(cfg, h, w);
  std::vector<int64_t> hs, ws;
  for (const auto& s : shapes) {
    hs.push_back(s[1]);
    ws.push_back(s[2]);
  }
  Acc acc;
  account_adapter(acc, cfg, d_text, n_ctx, hs, ws);
  acc.rep.input_h = h;
  acc.rep.input_w = w;
  acc.rep.flops_per_mac = flops_per_mac;
  acc.rep.config_echo = cfg.to_json();
  return acc.rep;
}

ComplexityReport t2i_reference_count(int64_t h, int64_t w, double flops_per_mac) {
  const std::vector<int64_t> chans = {320, 640, 1280, 1280};
  const int64_t r = 8, cin = 3 * r * r;
  if (h % (r * 8) != 0 || w % (r * 8) != 0)
    throw ShapeError("reference model input must be divisible by 64");
  Acc acc;
  int64_t hh = h / r, ww = w / r;
  acc.row("conv_in", conv_p(cin, chans[0], 3, 1), conv_m(cin, chans[0], 3, hh, ww, 1));
  int64_t prev = chans[0];
  for (size_t s = 0; s < chans.size(); ++s) {
    int64_t c = chans[s];
    for (int b = 0; b < 2; ++b) {
      int64_t ci = b == 0 ? prev : c;
      std::string p = "scale" + std::to_string(s + 1) + ".rb" + std::to_string(b + 1) + ".";
      if (ci != c)
        acc.row(p + "in_conv", conv_p(ci, c, 1, 1), conv_m(ci, c, 1, hh, ww, 1));
      acc.row(p + "conv3", conv_p(c, c, 3, 1), conv_m(c, c, 3, hh, ww, 1));
      acc.row(p + "conv1", conv_p(c, c, 1, 1), conv_m(c, c, 1, hh, ww, 1));
    }
    prev = c;
    if (s + 1 < chans.size()) {
      hh /= 2;
      ww /= 2;
    }
  }
  acc.rep.input_h = h;
  acc.rep.input_w = w;
  acc.rep.flops_per_mac = flops_per_mac;
  acc.rep.config_echo = "t2i-reference";
  return acc.rep;
}

}  // namespace nexus
