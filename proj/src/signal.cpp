#include "mole/signal.hpp"

#include <cmath>
#include <stdexcept>

#include "mole/rng.hpp"

namespace mole {

ToyEncoder make_toy_encoder(ParamStore& store, std::size_t vocab, std::size_t d_inst,
                            std::size_t d, std::uint64_t seed) {
  ToyEncoder enc{vocab, d_inst, d};
  Rng rng(mix_seed(seed, 101));
  store.add(enc.table_id, rng.normal_tensor({vocab, d_inst}, 1.0), /*frozen=*/true);
  store.add(enc.pooled_proj_id, rng.normal_tensor({d_inst, d}, 1.0 / std::sqrt(double(d_inst))),
            /*frozen=*/true);
  return enc;
}

InstructionEncoding toy_encode(const ParamStore& store, const ToyEncoder& encoder,
                               const std::vector<std::vector<int>>& instructions) {
  const std::size_t batch = instructions.size();
  if (batch == 0) throw std::invalid_argument("toy_encode: empty batch");
  const std::size_t len = instructions.front().size();
  if (len == 0) throw std::invalid_argument("toy_encode: empty instruction");
  const Tensor& table = store.value(encoder.table_id);
  const Tensor& proj = store.value(encoder.pooled_proj_id);
  const std::size_t di = encoder.d_inst, d = encoder.d;

  InstructionEncoding enc{Tensor({batch, len, di}), Tensor({batch, d}), instructions};
  std::vector<double> mean(di);
  for (std::size_t b = 0; b < batch; ++b) {
    if (instructions[b].size() != len) {
      throw std::invalid_argument("toy_encode: instructions in a batch must share a length");
    }
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      const int id = instructions[b][t];
      if (id < 0 || static_cast<std::size_t>(id) >= encoder.vocab) {
        throw std::out_of_range("toy_encode: unknown token id " + std::to_string(id));
      }
      for (std::size_t j = 0; j < di; ++j) {
        enc.h_inst.at(b, t, j) = table.at(static_cast<std::size_t>(id), j);
        mean[j] += table.at(static_cast<std::size_t>(id), j) / static_cast<double>(len);
      }
    }
    for (std::size_t j = 0; j < di; ++j)
      for (std::size_t c = 0; c < d; ++c) enc.pooled.at(b, c) += mean[j] * proj.at(j, c);
  }
  return enc;
}

PerceiverBottleneck make_perceiver(ParamStore& store, const std::string& prefix, std::size_t d_inst,
                                   std::size_t d, std::size_t layers, std::uint64_t seed,
                                   bool zero_w_out) {
  if (layers < 1) throw std::invalid_argument("perceiver needs S >= 1 attention layers");
  PerceiverBottleneck pb{prefix, d_inst, d, layers};
  Rng rng(mix_seed(seed, 202));
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  store.add(pb.w_in(), rng.normal_tensor({d_inst, d}, 1.0 / std::sqrt(double(d_inst))));
  store.add(pb.q_latent(), rng.normal_tensor({1, 1, d}, 1.0));
  for (std::size_t s = 0; s < layers; ++s) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) store.add(pb.attn(s, w), rng.normal_tensor({d, d}, sd));
  }
  store.add(pb.w_out(), zero_w_out ? Tensor({d, d}) : rng.normal_tensor({d, d}, sd));
  store.add(pb.ln_gamma(), Tensor({d}, 1.0));
  store.add(pb.ln_beta(), Tensor({d}));
  return pb;
}

Var distill(const ParamBinder& bind, const PerceiverBottleneck& pb, Var h_inst) {
  const Tensor& h = h_inst.value();
  if (h.rank() != 3 || h.dim(2) != pb.d_inst) {
    throw ShapeError("distill expects [B x L_inst x " + std::to_string(pb.d_inst) + "], got " +
                     shape_str(h.shape()));
  }
  if (h.dim(1) == 0) throw ShapeError("distill: empty instruction (L_inst = 0)");
  const std::size_t batch = h.dim(0), d = pb.d;
  Var x = ad::matmul(h_inst, bind(pb.w_in()));
  Var latent = ad::reshape(
      ad::gather_rows(ad::reshape(bind(pb.q_latent()), {1, d}), std::vector<std::size_t>(batch, 0)),
      {batch, 1, d});
  for (std::size_t s = 0; s < pb.layers; ++s) {
    Var q = ad::matmul(latent, bind(pb.attn(s, "wq")));
    Var k = ad::matmul(x, bind(pb.attn(s, "wk")));
    Var v = ad::matmul(x, bind(pb.attn(s, "wv")));
    latent = ad::add(latent, ad::matmul(ad::attention(q, k, v), bind(pb.attn(s, "wo"))));
  }
  return ad::reshape(latent, {batch, d});
}

Var fuse_global(const ParamBinder& bind, const PerceiverBottleneck& pb, Var l_s, Var pooled) {
  if (l_s.shape() != pooled.shape()) {
    throw ShapeError("fuse_global shape mismatch " + shape_str(l_s.shape()) + " vs " +
                     shape_str(pooled.shape()));
  }
  Var projected = ad::matmul(l_s, bind(pb.w_out()));
  return ad::add(ad::layer_norm(projected, bind(pb.ln_gamma()), bind(pb.ln_beta()), pb.ln_eps), pooled);
}

SignalMode parse_signal_mode(std::string_view name) {
  if (name == "pooled_only") return SignalMode::pooled_only;
  if (name == "full") return SignalMode::full;
  throw std::invalid_argument("unknown signal mode '" + std::string(name) +
                              "' (expected pooled_only or full)");
}

std::string_view signal_mode_name(SignalMode mode) {
  return mode == SignalMode::full ? "full" : "pooled_only";
}

SignalFn signal_variant(SignalMode mode) {
  if (mode == SignalMode::pooled_only) {
    return [](const ParamBinder&, const PerceiverBottleneck&, const InstructionEncoding& enc,
              Tape& tape) { return tape.constant(enc.pooled); };
  }
  return [](const ParamBinder& bind, const PerceiverBottleneck& pb, const InstructionEncoding& enc,
            Tape& tape) {
    return fuse_global(bind, pb, distill(bind, pb, tape.constant(enc.h_inst)),
                       tape.constant(enc.pooled));
  };
}

SignalFn signal_variant(std::string_view mode) { return signal_variant(parse_signal_mode(mode)); }

}  // namespace mole
