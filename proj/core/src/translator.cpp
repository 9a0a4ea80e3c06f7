#include "tmt/translator.hpp"

#include <cmath>

namespace tmt {

void add_tmt(ParamStore& store, const std::string& prefix, const TmtConfig& cfg, Rng& rng) {
  if (cfg.depth < 1) throw ConfigError(msg("translator depth ", cfg.depth, " < 1"));
  add_encoder(store, prefix + ".enc", cfg.stack(), rng);
  add_decoder(store, prefix + ".dec", cfg.stack(), {"src"}, rng);
  if (cfg.target_kind == TargetKind::dense)
    add_linear(store, prefix + ".out", cfg.d, cfg.d, rng);
}

namespace {

TmtOutput forward_text(const ParamStore& store, const std::string& prefix, const TmtConfig& cfg,
                       const Tensor& enhanced, const std::vector<int>& tokens,
                       const Forward& fw) {
  const int n = static_cast<int>(tokens.size());
  std::vector<int> dec_ids(tokens.begin(), tokens.end() - 1);
  dec_ids.insert(dec_ids.begin(), cfg.sos_id);
  Tensor x = add(embed(store, cfg.embed_table, dec_ids, cfg.scale_embed),
                 positional_encoding(n, cfg.d));
  x = apply_dropout(x, fw);
  Tensor dec = decode(store, prefix + ".dec", cfg.stack(), x, {{"src", enhanced, Tensor()}},
                      causal_mask(n), fw);
  Tensor logits = matmul(dec, transpose(store.use(cfg.embed_table)));
  TmtOutput out;
  out.enhanced_source = enhanced;
  out.translation = logits;
  out.loss = text_target_loss(logits, tokens);
  out.has_loss = true;
  return out;
}

TmtOutput forward_dense(const ParamStore& store, const std::string& prefix, const TmtConfig& cfg,
                        const Tensor& enhanced, const Tensor& target, const Forward& fw) {
  if (target.rank() != 2 || target.extent(1) != cfg.d)
    throw ConformanceError(msg("dense target shape ", shape_str(target.shape()),
                               " does not match width ", cfg.d));
  const int n = target.extent(0);
  Tensor shifted(Shape{n, cfg.d});
  {
    const auto& src = target.data();
    auto& dst = shifted.mutable_data();
    std::copy(src.begin(), src.end() - cfg.d, dst.begin() + cfg.d);
  }
  Tensor x = apply_dropout(add(shifted, positional_encoding(n, cfg.d)), fw);
  Tensor dec = decode(store, prefix + ".dec", cfg.stack(), x, {{"src", enhanced, Tensor()}},
                      causal_mask(n), fw);
  Tensor pred = linear(store, prefix + ".out", dec);
  TmtOutput out;
  out.enhanced_source = enhanced;
  out.translation = pred;
  out.loss = dense_target_loss(pred, target.detached(), cfg.dense_loss);
  out.has_loss = true;
  return out;
}

}  // namespace

TmtOutput tmt_forward(const ParamStore& store, const std::string& prefix, const TmtConfig& cfg,
                      const Tensor& source, const TmtTarget& target, const Forward& fw) {
  if (source.rank() != 2 || source.extent(1) != cfg.d)
    throw ConformanceError(msg("translator source shape ", shape_str(source.shape()),
                               " does not match width ", cfg.d));
  Tensor enhanced = encode(store, prefix + ".enc", cfg.stack(), source, Tensor(), fw);

  const bool have_tokens = target.tokens && !target.tokens->empty();
  const bool have_dense = target.dense && target.dense->size() > 0;
  if (cfg.target_kind == TargetKind::text && have_dense)
    throw ConfigError("translator configured for text targets got a dense target");
  if (cfg.target_kind == TargetKind::dense && have_tokens)
    throw ConfigError("translator configured for dense targets got a token target");

  if (!have_tokens && !have_dense) {
    if (fw.training) throw ContractError("translation target required during training");
    TmtOutput out;
    out.enhanced_source = enhanced;
    return out;
  }
  return cfg.target_kind == TargetKind::text
             ? forward_text(store, prefix, cfg, enhanced, *target.tokens, fw)
             : forward_dense(store, prefix, cfg, enhanced, *target.dense, fw);
}

Tensor text_target_loss(const Tensor& logits, const std::vector<int>& targets,
                        const std::vector<char>* keep) {
  if (logits.rank() != 2)
    throw ConformanceError(msg("logits must be rank-2, got ", shape_str(logits.shape())));
  const int n = logits.extent(0);
  if (static_cast<int>(targets.size()) != n)
    throw ConformanceError(msg(n, " logit rows for ", targets.size(), " target tokens"));
  if (keep && static_cast<int>(keep->size()) != n)
    throw ConformanceError(msg("keep flags length ", keep->size(), " for ", n, " positions"));

  int64_t counted = n;
  if (keep) {
    counted = 0;
    for (char c : *keep)
      if (c) ++counted;
  }
  if (counted == 0) throw ContractError("all target positions are padding");

  Tensor token_ll = pick(log_softmax(logits), targets);
  if (keep) {
    Tensor keep_t(Shape{n});
    auto& kd = keep_t.mutable_data();
    for (int i = 0; i < n; ++i) kd[static_cast<size_t>(i)] = (*keep)[static_cast<size_t>(i)] ? 1.0 : 0.0;
    token_ll = mul(token_ll, keep_t);
  }
  return scale(sum_all(token_ll), -1.0 / static_cast<double>(counted));
}

Tensor dense_target_loss(const Tensor& prediction, const Tensor& target, DenseLossKind kind) {
  if (prediction.shape() != target.shape())
    throw ConformanceError(msg("prediction shape ", shape_str(prediction.shape()),
                               " vs target shape ", shape_str(target.shape())));
  if (kind == DenseLossKind::l1) return mean_all(abs(sub(prediction, target)));

  if (prediction.rank() != 2)
    throw ConformanceError(msg("similarity loss needs rank-2 sequences, got ",
                               shape_str(prediction.shape())));
  const int n = prediction.extent(0);
  const int d = prediction.extent(1);
  if (n == 0) throw ConformanceError("similarity loss over an empty sequence");

  // Positions where either vector is zero have cosine 0 by definition and
  // contribute the constant 1; only live rows enter the graph.
  std::vector<int> live;
  for (int i = 0; i < n; ++i) {
    double pn = 0.0, tn = 0.0;
    for (int j = 0; j < d; ++j) {
      const double pv = prediction.data()[static_cast<int64_t>(i) * d + j];
      const double tv = target.data()[static_cast<int64_t>(i) * d + j];
      pn += pv * pv;
      tn += tv * tv;
    }
    if (pn > 0.0 && tn > 0.0) live.push_back(i);
  }
  if (live.empty()) return Tensor::scalar(1.0);

  Tensor p = gather_rows(prediction, live);
  Tensor t = gather_rows(target, live);
  Tensor dots = sum(mul(p, t), 1);
  Tensor norms = mul(sqrt(sum(mul(p, p), 1)), sqrt(sum(mul(t, t), 1)));
  Tensor cos_sum = sum_all(div(dots, norms));
  return scale(sub(Tensor::scalar(static_cast<double>(n)), cos_sum),
               1.0 / static_cast<double>(n));
}

}  // namespace tmt
