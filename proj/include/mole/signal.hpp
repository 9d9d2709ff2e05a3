#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mole/autodiff.hpp"
#include "mole/param_store.hpp"

namespace mole {

// Stand-in for a frozen text-encoder pair: token-level features plus one
// pooled embedding per instance.
struct InstructionEncoding {
  Tensor h_inst;  // [B x L_inst x D_inst]
  Tensor pooled;  // [B x D]
  std::vector<std::vector<int>> ids;
};

struct ToyEncoder {
  std::size_t vocab = 0;
  std::size_t d_inst = 0;
  std::size_t d = 0;
  std::string table_id = "encoder.table";              // [vocab x D_inst], frozen
  std::string pooled_proj_id = "encoder.pooled_proj";  // [D_inst x D], frozen
};

// Frozen random tables, fully determined by `seed`.
ToyEncoder make_toy_encoder(ParamStore& store, std::size_t vocab, std::size_t d_inst,
                            std::size_t d, std::uint64_t seed);

// H_inst rows are table lookups; pooled is the mean token embedding pushed
// through the frozen projection. All instructions in a batch must share a
// length.
InstructionEncoding toy_encode(const ParamStore& store, const ToyEncoder& encoder,
                               const std::vector<std::vector<int>>& instructions);

struct PerceiverBottleneck {
  std::string prefix;
  std::size_t d_inst = 0;
  std::size_t d = 0;
  std::size_t layers = 2;  // S
  double ln_eps = 1e-5;

  std::string w_in() const { return prefix + ".w_in"; }
  std::string q_latent() const { return prefix + ".q_latent"; }
  std::string w_out() const { return prefix + ".w_out"; }
  std::string ln_gamma() const { return prefix + ".ln.gamma"; }
  std::string ln_beta() const { return prefix + ".ln.beta"; }
  std::string attn(std::size_t s, const char* which) const {
    return prefix + ".attn" + std::to_string(s) + "." + which;
  }
};

PerceiverBottleneck make_perceiver(ParamStore& store, const std::string& prefix, std::size_t d_inst,
                                   std::size_t d, std::size_t layers, std::uint64_t seed,
                                   bool zero_w_out = false);

// X~ = H W_in; L0 = tile_B(Q_latent); L_s = L_{s-1} + Attn(L_{s-1} Wq, X~ Wk, X~ Wv) Wo.
// Returns L_S as [B x D].
Var distill(const ParamBinder& bind, const PerceiverBottleneck& pb, Var h_inst);

// LayerNorm(L_S W_out) + pooled
Var fuse_global(const ParamBinder& bind, const PerceiverBottleneck& pb, Var l_s, Var pooled);

enum class SignalMode { pooled_only, full };
SignalMode parse_signal_mode(std::string_view name);
std::string_view signal_mode_name(SignalMode mode);

using SignalFn = std::function<Var(const ParamBinder&, const PerceiverBottleneck&,
                                   const InstructionEncoding&, Tape&)>;
SignalFn signal_variant(SignalMode mode);
SignalFn signal_variant(std::string_view mode);

}  // namespace mole
