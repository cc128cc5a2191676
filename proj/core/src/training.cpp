#include "ctxprune/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ctxprune/checkpoint.hpp"
#include "ctxprune/dumps.hpp"
#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"

namespace ctxprune {

namespace {

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kGateStream = 2;
constexpr std::uint64_t kShuffleStream = 3;
constexpr std::uint64_t kNoiseStream = 4;
constexpr std::uint64_t kEvalStream = 5;

std::string fmt17(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  const std::size_t v = logits.cols();
  const auto row = logits.data().subspan(r * v, v);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Tensor column_of(const std::vector<double>& v) { return Tensor({v.size(), 1}, v); }

bool stage_gated(const RunConfig& c, Stage stage) {
  if (c.gating == GatingKind::Dense) return false;
  return stage == Stage::Encoder ? c.gate_encoder : c.gate_decoder;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ParameterError("train config: " + m); };
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(sparsity_weight >= 0.0)) fail("sparsity_weight must be >= 0");
  if (!(target_keep_ratio > 0.0 && target_keep_ratio <= 1.0)) fail("target_keep_ratio must be in (0, 1]");
  if (!(temperature_start > 0.0 && temperature_end > 0.0)) fail("temperatures must be positive");
  if (temperature_end > temperature_start) fail("temperature must not increase");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
}

double TrainConfig::lr_at(std::size_t step) const {
  if (warmup_steps == 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
}

double TrainConfig::lambda_at(std::size_t step) const {
  if (warmup_steps == 0) return sparsity_weight;
  return sparsity_weight * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

double TrainConfig::temperature_at(std::size_t step) const {
  const std::size_t window = anneal_steps ? anneal_steps : std::max<std::size_t>(1, steps / 2);
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(window));
  return temperature_start + (temperature_end - temperature_start) * f;
}

std::string_view to_string(GatingKind kind) {
  switch (kind) {
    case GatingKind::Dense: return "dense";
    case GatingKind::Local: return "local";
    case GatingKind::Global: return "global";
  }
  return "?";
}

GatingKind gating_kind_from_string(std::string_view s) {
  if (s == "dense") return GatingKind::Dense;
  if (s == "local") return GatingKind::Local;
  if (s == "global") return GatingKind::Global;
  throw ParameterError("unknown gating '" + std::string(s) + "'");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  task.validate();
  if (task.feature_dim != model.feature_dim) throw ParameterError("task feature_dim must equal model feature_dim");
  if (vocab::kSize > static_cast<int>(model.vocab_size)) throw ParameterError("model vocab smaller than task vocab");
  if (provider.n_speakers < task.n_speakers || provider.n_events < task.n_events ||
      provider.n_languages < task.n_languages) {
    throw ParameterError("provider covers fewer speakers/events/languages than the task draws");
  }
  const std::size_t longest =
      task.max_tokens * task.frames_per_token +
      static_cast<std::size_t>(std::ceil(static_cast<double>(task.max_tokens * task.frames_per_token) *
                                         task.silence_max / (1.0 - task.silence_max))) + 1;
  if (longest > model.max_frames) throw ParameterError("task utterances can exceed max_frames");
  if (gating != GatingKind::Dense && mode == ExecMode::Dense) {
    throw ParameterError("gated runs need temporal or utterance mode");
  }
  if (gating == GatingKind::Dense && mode != ExecMode::Dense) throw ParameterError("dense runs use mode dense");
  if (gating != GatingKind::Dense && !gate_encoder && !gate_decoder) throw ParameterError("no stage is gated");
  if (train_size == 0 || eval_size == 0) throw ParameterError("splits must be non-empty");
  ContextConfig::parse(context);
}

std::string RunConfig::to_json() const {
  const auto& t = train;
  nlohmann::json j{
      {"schema_version", 1},
      {"model", nlohmann::json::parse(model.to_json())},
      {"train",
       {{"batch_size", t.batch_size},
        {"lr", t.lr},
        {"warmup_steps", t.warmup_steps},
        {"steps", t.steps},
        {"pretrain_steps", t.pretrain_steps},
        {"sparsity_weight", t.sparsity_weight},
        {"target_keep_ratio", t.target_keep_ratio},
        {"temperature_start", t.temperature_start},
        {"temperature_end", t.temperature_end},
        {"anneal_steps", t.anneal_steps},
        {"grad_clip", t.grad_clip},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"seed", t.seed}}},
      {"task",
       {{"kind", task.kind == TaskKind::AsrLike ? "asr" : "st"},
        {"n_languages", task.n_languages},
        {"n_speakers", task.n_speakers},
        {"n_events", task.n_events},
        {"feature_dim", task.feature_dim},
        {"silence_min", task.silence_min},
        {"silence_max", task.silence_max},
        {"min_tokens", task.min_tokens},
        {"max_tokens", task.max_tokens},
        {"frames_per_token", task.frames_per_token},
        {"speech_noise", task.speech_noise},
        {"speaker_offset", task.speaker_offset},
        {"silence_noise", task.silence_noise},
        {"speech_level", task.speech_level},
        {"phones", task.phones},
        {"task_seed", task.task_seed}}},
      {"provider",
       {{"speaker_dim", provider.speaker_dim},
        {"event_dim", provider.event_dim},
        {"lang_dim", provider.lang_dim},
        {"n_speakers", provider.n_speakers},
        {"n_events", provider.n_events},
        {"n_languages", provider.n_languages},
        {"speaker_jitter", provider.speaker_jitter},
        {"event_noise", provider.event_noise},
        {"seed", provider.seed}}},
      {"context", context},
      {"gating", to_string(gating)},
      {"mode", to_string(mode)},
      {"gate_encoder", gate_encoder},
      {"gate_decoder", gate_decoder},
      {"train_size", train_size},
      {"eval_size", eval_size},
      {"data_seed", data_seed},
      {"eval_seed", eval_seed},
      {"context_dir", context_dir.string()}};
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RunConfig c;
  auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model").dump());
  if (j.contains("train")) {
    const auto& t = j.at("train");
    get(t, "batch_size", c.train.batch_size);
    get(t, "lr", c.train.lr);
    get(t, "warmup_steps", c.train.warmup_steps);
    get(t, "steps", c.train.steps);
    get(t, "pretrain_steps", c.train.pretrain_steps);
    get(t, "sparsity_weight", c.train.sparsity_weight);
    get(t, "target_keep_ratio", c.train.target_keep_ratio);
    get(t, "temperature_start", c.train.temperature_start);
    get(t, "temperature_end", c.train.temperature_end);
    get(t, "anneal_steps", c.train.anneal_steps);
    get(t, "grad_clip", c.train.grad_clip);
    get(t, "beta1", c.train.beta1);
    get(t, "beta2", c.train.beta2);
    get(t, "adam_eps", c.train.adam_eps);
    get(t, "seed", c.train.seed);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    if (t.contains("kind")) {
      const auto k = t.at("kind").get<std::string>();
      if (k != "asr" && k != "st") throw ParameterError("task kind must be 'asr' or 'st'");
      c.task.kind = k == "asr" ? TaskKind::AsrLike : TaskKind::StLike;
    }
    get(t, "n_languages", c.task.n_languages);
    get(t, "n_speakers", c.task.n_speakers);
    get(t, "n_events", c.task.n_events);
    get(t, "feature_dim", c.task.feature_dim);
    get(t, "silence_min", c.task.silence_min);
    get(t, "silence_max", c.task.silence_max);
    get(t, "min_tokens", c.task.min_tokens);
    get(t, "max_tokens", c.task.max_tokens);
    get(t, "frames_per_token", c.task.frames_per_token);
    get(t, "speech_noise", c.task.speech_noise);
    get(t, "speaker_offset", c.task.speaker_offset);
    get(t, "silence_noise", c.task.silence_noise);
    get(t, "speech_level", c.task.speech_level);
    get(t, "phones", c.task.phones);
    get(t, "task_seed", c.task.task_seed);
  }
  if (j.contains("provider")) {
    const auto& p = j.at("provider");
    get(p, "speaker_dim", c.provider.speaker_dim);
    get(p, "event_dim", c.provider.event_dim);
    get(p, "lang_dim", c.provider.lang_dim);
    get(p, "n_speakers", c.provider.n_speakers);
    get(p, "n_events", c.provider.n_events);
    get(p, "n_languages", c.provider.n_languages);
    get(p, "speaker_jitter", c.provider.speaker_jitter);
    get(p, "event_noise", c.provider.event_noise);
    get(p, "seed", c.provider.seed);
  }
  get(j, "context", c.context);
  if (j.contains("gating")) c.gating = gating_kind_from_string(j.at("gating").get<std::string>());
  if (j.contains("mode")) c.mode = exec_mode_from_string(j.at("mode").get<std::string>());
  get(j, "gate_encoder", c.gate_encoder);
  get(j, "gate_decoder", c.gate_decoder);
  get(j, "train_size", c.train_size);
  get(j, "eval_size", c.eval_size);
  get(j, "data_seed", c.data_seed);
  get(j, "eval_seed", c.eval_seed);
  if (j.contains("context_dir")) c.context_dir = j.at("context_dir").get<std::string>();
  c.validate();
  return c;
}

Tensor sparsity_loss(std::span<const GateSet> gates, double target, bool encoder, bool decoder) {
  Tensor total = Tensor::scalar(0.0);
  for (Stage stage : {Stage::Encoder, Stage::Decoder}) {
    if ((stage == Stage::Encoder && !encoder) || (stage == Stage::Decoder && !decoder)) continue;
    std::vector<Tensor> probs;
    for (const auto& set : gates) {
      for (const auto& e : set.entries()) {
        if (e.stage != stage) continue;
        probs.push_back(e.keep_prob.defined() ? e.keep_prob : column_of(e.probability));
      }
    }
    if (probs.empty()) continue;
    total = add(total, square(add_scalar(mean(concat(probs, 0)), -target)));
  }
  return total;
}

std::vector<std::pair<std::size_t, std::size_t>> context_stream_shapes(const ContextConfig& context,
                                                                       const ProviderConfig& provider,
                                                                       std::size_t d_model, std::size_t frames,
                                                                       Stage stage) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (auto kind : context.streams) {
    const std::size_t dim = provider.dim(kind, d_model);
    switch (kind) {
      case StreamKind::Front: out.emplace_back(stage == Stage::Encoder ? frames : 1, dim); break;
      case StreamKind::Event: out.emplace_back(std::max<std::size_t>(1, frames / 2), dim); break;
      default: out.emplace_back(1, dim); break;
    }
  }
  return out;
}

Trainer::Trainer(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  context_ = ContextConfig::parse(config_.context);
  decoder_context_ = decoder_context(context_);
  auto synthetic = std::make_shared<SyntheticContextProvider>(config_.provider);
  if (config_.context_dir.empty()) {
    provider_ = synthetic;
  } else {
    provider_ = std::make_shared<ExternalContextProvider>(config_.context_dir, synthetic);
  }
  const RngState root(config_.train.seed);
  model_ = std::make_unique<ToyModel>(config_.model, store_, root.split(kModelStream));
  RngState gate_rng = root.split(kGateStream);
  const std::size_t d = config_.model.d_model;
  if (config_.gating == GatingKind::Local) {
    if (config_.gate_encoder) {
      enc_gate_ = std::make_unique<LocalGatePredictor>(store_, "gate.enc", config_.model, Stage::Encoder, context_,
                                                       stream_dims(context_, config_.provider, d), gate_rng);
    }
    if (config_.gate_decoder) {
      dec_gate_ = std::make_unique<LocalGatePredictor>(store_, "gate.dec", config_.model, Stage::Decoder,
                                                       decoder_context_,
                                                       stream_dims(decoder_context_, config_.provider, d), gate_rng);
    }
  } else if (config_.gating == GatingKind::Global) {
    global_gate_ = std::make_unique<GlobalGatePredictor>(store_, "gate.global", config_.model, gate_rng);
  }
  for (const auto& [_, t] : store_.entries()) {
    adam_m_.emplace_back(t.numel(), 0.0);
    adam_v_.emplace_back(t.numel(), 0.0);
  }
}

const LocalGatePredictor* Trainer::local_predictor(Stage stage) const {
  return stage == Stage::Encoder ? enc_gate_.get() : dec_gate_.get();
}

ForwardResult Trainer::forward(const SyntheticUtterance& utt, bool training, RngState rng, double temperature) const {
  ForwardResult r;
  const auto inputs = decoder_inputs(utt);
  if (config_.gating == GatingKind::Dense || pretraining()) {
    r.encoder = model_->encode(utt.features, ExecMode::Dense, nullptr);
    r.logits = model_->decode(inputs, r.encoder.output, ExecMode::Dense, nullptr);
    r.gates = GateSet::uniform(config_.model, utt.frames(), inputs.size(), Granularity::Position, true);
    return r;
  }
  const GateSampling sampling{training, temperature, config_.model.gate_threshold, true};
  const LocalGater::Stages stages{config_.gate_encoder, config_.gate_decoder};
  if (config_.gating == GatingKind::Local) {
    ContextBundle enc_bundle, dec_bundle;
    if (enc_gate_) enc_bundle = build_bundle(*provider_, context_, utt);
    if (dec_gate_) dec_bundle = build_bundle(*provider_, decoder_context_, utt);
    LocalGater gater(enc_gate_.get(), dec_gate_.get(), std::move(enc_bundle), std::move(dec_bundle), config_.mode,
                     sampling, rng, stages);
    r.encoder = model_->encode(utt.features, config_.mode, &gater);
    r.logits = model_->decode(inputs, r.encoder.output, config_.mode, &gater);
    r.gates = gater.gates();
  } else {
    const int context_id = utt.language_id % static_cast<int>(config_.model.n_context_ids);
    GlobalGater gater(global_gate_.get(), config_.model, context_id, config_.mode, sampling, rng, stages);
    r.encoder = model_->encode(utt.features, config_.mode, &gater);
    r.logits = model_->decode(inputs, r.encoder.output, config_.mode, &gater);
    r.gates = gater.gates();
  }
  return r;
}

StepMetrics Trainer::step(std::span<const SyntheticUtterance> batch) {
  if (batch.empty()) throw ParameterError("empty batch");
  const auto& tc = config_.train;
  StepMetrics m;
  m.step = step_;
  m.dense_phase = pretraining();
  // Each phase runs its own warmup; gate schedules start with gating.
  const std::size_t s = m.dense_phase ? step_ : step_ - tc.pretrain_steps;
  m.lr = tc.lr_at(s);
  m.temperature = tc.temperature_at(s);
  m.lambda = m.dense_phase ? 0.0 : tc.lambda_at(s);

  store_.zero_grad();
  std::vector<GateSet> gates;
  Tensor task;
  const RngState noise = RngState(tc.seed).split(kNoiseStream).split(step_);
  for (std::size_t j = 0; j < batch.size(); ++j) {
    ForwardResult r = forward(batch[j], true, noise.split(j), m.temperature);
    const Tensor ce = cross_entropy(r.logits, decoder_targets(batch[j]));
    task = task.defined() ? add(task, ce) : ce;
    gates.push_back(std::move(r.gates));
  }
  task = scale(task, 1.0 / static_cast<double>(batch.size()));
  const bool enc = !m.dense_phase && stage_gated(config_, Stage::Encoder);
  const bool dec = !m.dense_phase && stage_gated(config_, Stage::Decoder);
  const Tensor sparsity = sparsity_loss(gates, tc.target_keep_ratio, enc, dec);
  const Tensor loss = add(task, scale(sparsity, m.lambda));
  m.task_loss = task.item();
  m.sparsity_loss = sparsity.item();

  double prob_sum = 0.0, prob_n = 0.0, kept = 0.0, total = 0.0;
  for (const auto& set : gates) {
    for (const auto& e : set.entries()) {
      if (m.dense_phase || !stage_gated(config_, e.stage)) continue;
      for (auto p : e.probability) prob_sum += p;
      for (auto d : e.decision) kept += d;
      prob_n += static_cast<double>(e.probability.size());
      total += static_cast<double>(e.decision.size());
    }
  }
  if (prob_n > 0) m.mean_keep = prob_sum / prob_n;
  if (total > 0) m.keep_rate = kept / total;

  if (!std::isfinite(loss.item())) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step_ << ": task=" << m.task_loss << " sparsity=" << m.sparsity_loss
        << " lambda=" << m.lambda << " lr=" << m.lr << " utterances=";
    for (const auto& u : batch) msg << u.id << ' ';
    throw NumericError(msg.str());
  }
  backward(loss);

  double sq = 0.0;
  for (const auto& [_, t] : store_.entries()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.grad_norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step_));
  const double clip = (tc.grad_clip > 0.0 && m.grad_norm > tc.grad_clip) ? tc.grad_clip / m.grad_norm : 1.0;

  const double t1 = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(tc.beta1, t1), bc2 = 1.0 - std::pow(tc.beta2, t1);
  std::size_t k = 0;
  for (const auto& [_, param] : store_.entries()) {
    Tensor p = param;
    if (p.has_grad()) {
      auto w = p.mutable_data();
      const auto g = p.grad();
      auto& mm = adam_m_[k];
      auto& vv = adam_v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        mm[i] = tc.beta1 * mm[i] + (1.0 - tc.beta1) * gi;
        vv[i] = tc.beta2 * vv[i] + (1.0 - tc.beta2) * gi * gi;
        w[i] -= m.lr * (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + tc.adam_eps);
      }
    }
    ++k;
  }
  ++step_;
  return m;
}

FlopsOptions run_flops_options(const RunConfig& config, std::size_t frames) {
  FlopsOptions o;
  o.gate_encoder = config.gate_encoder;
  o.gate_decoder = config.gate_decoder;
  if (config.gating == GatingKind::Local) {
    o.predictor = PredictorKind::Local;
    const ContextConfig ctx = ContextConfig::parse(config.context);
    const std::size_t d = config.model.d_model;
    o.encoder_streams = context_stream_shapes(ctx, config.provider, d, frames, Stage::Encoder);
    o.decoder_streams = context_stream_shapes(decoder_context(ctx), config.provider, d, frames, Stage::Decoder);
  } else if (config.gating == GatingKind::Global) {
    o.predictor = PredictorKind::Global;
  }
  return o;
}

FlopsOptions Trainer::flops_options(std::size_t frames) const { return run_flops_options(config_, frames); }

EvalResult Trainer::evaluate(std::span<const SyntheticUtterance> data) const {
  NoGradGuard no_grad;
  EvalResult out;
  std::size_t correct = 0;
  const ExecMode mode = config_.gating == GatingKind::Dense ? ExecMode::Dense : config_.mode;
  for (const auto& [stage, kinds] : {std::pair{Stage::Encoder, kEncoderKinds}, std::pair{Stage::Decoder, kDecoderKinds}}) {
    for (std::size_t l = 0; l < config_.model.n_layers(stage); ++l)
      for (auto k : kinds) out.keep_rates.push_back({stage, l, k, 0, 0});
  }
  const RngState eval_rng = RngState(config_.train.seed).split(kEvalStream);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& utt = data[i];
    ForwardResult r = forward(utt, false, eval_rng.split(i));
    const auto targets = decoder_targets(utt);
    for (std::size_t p = 0; p < targets.size(); ++p) {
      if (static_cast<int>(argmax_row(r.logits, p)) == targets[p]) ++correct;
    }
    out.tokens += targets.size();
    for (const auto& e : r.gates.entries()) {
      auto it = std::find_if(out.keep_rates.begin(), out.keep_rates.end(),
                             [&](const KeepRate& k) { return k.layer == e.layer && k.kind == e.kind; });
      const std::size_t w = e.granularity == Granularity::Utterance ? r.gates.length(e.stage) : 1;
      for (auto d : e.decision) {
        it->kept += w * d;
        it->total += w;
      }
    }
    FlopsReport f = count_flops_model(r.gates, config_.model, mode, flops_options(utt.frames()));
    out.flops += f;
    out.gates.push_back(std::move(r.gates));
  }
  out.token_accuracy = out.tokens ? static_cast<double>(correct) / static_cast<double>(out.tokens) : 0.0;
  for (Stage stage : {Stage::Encoder, Stage::Decoder}) {
    std::size_t kept = 0, total = 0;
    for (const auto& k : out.keep_rates) {
      if (k.stage != stage) continue;
      kept += k.kept;
      total += k.total;
    }
    const double rate = total ? static_cast<double>(kept) / static_cast<double>(total) : 1.0;
    (stage == Stage::Encoder ? out.keep_encoder : out.keep_decoder) = rate;
  }
  return out;
}

std::vector<int> Trainer::greedy_decode(const SyntheticUtterance& utt, std::size_t max_tokens) const {
  NoGradGuard no_grad;
  // The encoder pass is shared; every decoder step re-runs the causal stack on
  // the prefix, which leaves earlier positions (and their gates) unchanged.
  SyntheticUtterance prefix = utt;
  std::vector<int> out;
  for (std::size_t i = 0; i < max_tokens; ++i) {
    prefix.targets = out;
    const ForwardResult r = forward(prefix, false, RngState(config_.train.seed).split(kEvalStream));
    const int next = static_cast<int>(argmax_row(r.logits, r.logits.rows() - 1));
    if (next == vocab::kEos) break;
    out.push_back(next);
  }
  return out;
}

std::string EvalResult::to_json(const std::string& context) const {
  nlohmann::json rates = nlohmann::json::array();
  for (const auto& k : keep_rates) {
    if (k.total == 0) continue;
    rates.push_back({{"stage", to_string(k.stage)},
                     {"layer", k.layer},
                     {"module_kind", to_string(k.kind)},
                     {"context", context},
                     {"kept", k.kept},
                     {"total", k.total},
                     {"keep_rate", k.rate()}});
  }
  nlohmann::json j{{"schema_version", 1},
                   {"token_accuracy", token_accuracy},
                   {"tokens", tokens},
                   {"keep_encoder", keep_encoder},
                   {"keep_decoder", keep_decoder},
                   {"utterances", gates.size()},
                   {"keep_rates", rates}};
  return j.dump(2);
}

std::string metrics_csv_header() {
  return "step,phase,lr,temperature,lambda,task_loss,sparsity_loss,mean_keep,keep_rate,grad_norm";
}

std::string metrics_csv_row(const StepMetrics& m) {
  return std::to_string(m.step) + (m.dense_phase ? ",dense," : ",gated,") + fmt17(m.lr) + ',' + fmt17(m.temperature) + ',' + fmt17(m.lambda) + ',' +
         fmt17(m.task_loss) + ',' + fmt17(m.sparsity_loss) + ',' + fmt17(m.mean_keep) + ',' + fmt17(m.keep_rate) +
         ',' + fmt17(m.grad_norm);
}

RunOutput run_training(const RunConfig& config, const std::filesystem::path& out_dir,
                       const std::function<void(const StepMetrics&)>& on_step) {
  Trainer trainer(config);
  const auto train = generate_dataset(config.task, config.train_size, config.data_seed);
  const auto eval = generate_dataset(config.task, config.eval_size, config.eval_seed);

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir / "checkpoints");
    std::filesystem::create_directories(out_dir / "eval");
    std::ofstream(out_dir / "config.json") << config.to_json() << '\n';
    csv.open(out_dir / "metrics.csv");
    if (!csv) throw FormatError("cannot write " + (out_dir / "metrics.csv").string());
    csv << metrics_csv_header() << '\n';
  }

  RunOutput out;
  const std::size_t b = config.train.batch_size;
  std::vector<std::size_t> order(train.size());
  std::vector<SyntheticUtterance> batch;
  std::size_t cursor = order.size(), epoch = 0;
  for (std::size_t s = 0; s < config.train.pretrain_steps + config.train.steps; ++s) {
    batch.clear();
    while (batch.size() < b) {
      if (cursor == order.size()) {
        // Fresh Fisher-Yates shuffle per epoch.
        RngState rng = RngState(config.train.seed).split(kShuffleStream).split(epoch++);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        cursor = 0;
      }
      batch.push_back(train[order[cursor++]]);
    }
    const StepMetrics m = trainer.step(batch);
    out.metrics.push_back(m);
    if (csv.is_open()) csv << metrics_csv_row(m) << '\n';
    if (on_step) on_step(m);
  }
  out.eval = trainer.evaluate(eval);

  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "checkpoints" / "final.ckpt", trainer.params());
    GateDump dump;
    dump.mode = std::string(to_string(config.gating == GatingKind::Dense ? ExecMode::Dense : config.mode));
    dump.context = config.context;
    std::vector<LabelRow> labels;
    std::vector<TokenRow> tokens;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      dump.append(out.eval.gates[i], i);
      const auto energy = frame_energy(eval[i].features);
      for (std::size_t t = 0; t < eval[i].frames(); ++t) labels.push_back({i, t, eval[i].frame_labels[t], energy[t]});
      const auto targets = decoder_targets(eval[i]);
      for (std::size_t p = 0; p < targets.size(); ++p) {
        const std::string s = vocab::surface(targets[p]);
        tokens.push_back({i, p, targets[p], s, vocab::starts_word(s)});
      }
    }
    write_gate_dump(out_dir / "eval" / "gates.csv", dump);
    write_label_dump(out_dir / "eval" / "labels.csv", labels);
    write_token_dump(out_dir / "eval" / "tokens.csv", tokens);
    std::ofstream(out_dir / "eval" / "flops.json") << out.eval.flops.to_json() << '\n';
    std::ofstream(out_dir / "eval" / "eval.json") << out.eval.to_json(config.context) << '\n';
  }
  return out;
}

}  // namespace ctxprune
