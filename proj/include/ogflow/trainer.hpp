#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ogflow/datagen.hpp"
#include "ogflow/errors.hpp"
#include "ogflow/evalkit.hpp"
#include "ogflow/losses.hpp"
#include "ogflow/network.hpp"
#include "ogflow/random.hpp"

// Optimization driver: Adam with bias correction, the learning-rate and
// lambda_reg schedules, the supervised loop and the three-inference
// self-supervised loop, plus bit-exact checkpointing.
//
// Every stochastic choice inside training (batch sampling, FPS seeds,
// synthetic-pair seeds) is derived from (rng_seed, step) counters rather
// than from consumed RNG state, so resuming from a checkpoint reproduces the
// uninterrupted run bit for bit.

namespace ogflow {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 4;
    double lr_initial = 1e-3;
    double lr_decay = 0.85;
    int lr_decay_interval_epochs = 10;
    double synth_flow_epoch_fraction = 0.2; // drop the synthetic flow loss after this
    double lambda_reg_start = 3.0;
    double lambda_reg_end = 1.0;
    double lambda_reg_ramp_begin_fraction = 0.33;
    double lambda_reg_ramp_end_fraction = 0.47;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t rng_seed = 0;
    int max_steps = 0; // 0: run cfg.epochs full epochs
    bool deterministic = false;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw ConfigError("train config: epochs/batch >= 1");
        if (!(lr_initial > 0.0) || !(lr_decay > 0.0) || lr_decay_interval_epochs < 1)
            throw ConfigError("train config: learning-rate schedule must be positive");
        if (synth_flow_epoch_fraction < 0.0 || synth_flow_epoch_fraction > 1.0)
            throw ConfigError("train config: synth flow fraction in [0,1]");
        if (lambda_reg_ramp_begin_fraction < 0.0 || lambda_reg_ramp_end_fraction > 1.0 ||
            lambda_reg_ramp_begin_fraction > lambda_reg_ramp_end_fraction)
            throw ConfigError("train config: bad lambda_reg ramp window");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0) ||
            !(adam_eps > 0.0))
            throw ConfigError("train config: bad adam hyperparameters");
        if (max_steps < 0) throw ConfigError("train config: max_steps must be >= 0");
    }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ConfigError("lr_at: negative epoch");
    return cfg.lr_initial * std::pow(cfg.lr_decay, epoch / cfg.lr_decay_interval_epochs);
}

/// lambda_reg schedule: start value before the ramp window, linear
/// interpolation inside it, end value after. The window is given as epoch
/// fractions of the configured run length.
inline double lambda_reg_at(double epoch, const TrainConfig& cfg) {
    if (epoch < 0.0) throw ConfigError("lambda_reg_at: negative epoch");
    const double begin = cfg.lambda_reg_ramp_begin_fraction * cfg.epochs;
    const double end = cfg.lambda_reg_ramp_end_fraction * cfg.epochs;
    if (epoch <= begin) return cfg.lambda_reg_start;
    if (epoch >= end) return cfg.lambda_reg_end;
    const double t = (epoch - begin) / (end - begin);
    return cfg.lambda_reg_start + t * (cfg.lambda_reg_end - cfg.lambda_reg_start);
}

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::uint64_t step = 0; // completed optimizer steps

    static AdamState init(const ModelParams<T>& params) {
        AdamState s;
        for (const auto& e : params.entries()) {
            s.m.push_back(Tensor<T>::zeros(e.value.shape()));
            s.v.push_back(Tensor<T>::zeros(e.value.shape()));
        }
        return s;
    }
};

/// Standard bias-corrected Adam update. Parameters without an allocated
/// gradient are treated as zero-gradient (their values do not move on the
/// first step).
template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, double lr, const TrainConfig& cfg) {
    state.step += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    auto& entries = params.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
        auto& val = entries[p].value;
        const bool has = val.has_grad();
        const std::size_t n = val.numel();
        Tensor<T>& m = state.m[p];
        Tensor<T>& v = state.v[p];
        for (std::size_t i = 0; i < n; ++i) {
            const double g = has ? static_cast<double>(val.grad().v[i]) : 0.0;
            if (!std::isfinite(g))
                throw PoisonedGradientError("adam_step: non-finite gradient in " +
                                            entries[p].name + " at step " +
                                            std::to_string(state.step));
            const double mi = b1 * static_cast<double>(m.v[i]) + (1.0 - b1) * g;
            const double vi = b2 * static_cast<double>(v.v[i]) + (1.0 - b2) * g * g;
            m.v[i] = static_cast<T>(mi);
            v.v[i] = static_cast<T>(vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
            val.data().v[i] = static_cast<T>(static_cast<double>(val.data().v[i]) - update);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format "OGCK" (little-endian):
//   magic | u32 version=1 | model config | u32 param count
//   per param: u32 name len | name | u32 rank | u64 dims... | f32 payload
//   adam m payloads | adam v payloads (same order/shapes) | u64 step
//   u64 rng_state[4]

namespace ckpt {

inline constexpr char kMagic[4] = {'O', 'G', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    void u8(std::uint8_t x) { buf_.push_back(static_cast<char>(x)); }
    void u32(std::uint32_t x) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
    }
    void i32(std::int32_t x) { u32(static_cast<std::uint32_t>(x)); }
    void u64(std::uint64_t x) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }
    void f32s(const std::vector<float>& xs) {
        const std::size_t base = buf_.size();
        buf_.resize(base + xs.size() * 4);
        std::memcpy(buf_.data() + base, xs.data(), xs.size() * 4);
    }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(std::string buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i)
            x |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return x;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    std::uint64_t u64() {
        need(8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i)
            x |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return x;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<float> f32s(std::size_t count) {
        need(count * 4);
        std::vector<float> out(count);
        std::memcpy(out.data(), buf_.data() + pos_, count * 4);
        pos_ += count * 4;
        return out;
    }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t bytes) {
        if (buf_.size() - pos_ < bytes)
            throw TruncatedFileError(path_ + ": truncated checkpoint");
    }
    std::string buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline void write_config(Writer& w, const ModelConfig& cfg) {
    w.i32(cfg.levels);
    w.u32(static_cast<std::uint32_t>(cfg.points_per_level.size()));
    for (auto p : cfg.points_per_level) w.u64(p);
    w.u32(static_cast<std::uint32_t>(cfg.feature_widths.size()));
    for (auto x : cfg.feature_widths) w.i32(x);
    w.u32(static_cast<std::uint32_t>(cfg.cost_volume_widths.size()));
    for (auto x : cfg.cost_volume_widths) w.i32(x);
    w.i32(cfg.occ_width);
    w.i32(cfg.k1);
    w.i32(cfg.k2);
    w.i32(cfg.k_conv);
    w.i32(cfg.k_up);
    w.i32(cfg.input_feature_dim);
    w.u8(static_cast<std::uint8_t>(cfg.cost_volume_mode));
}

inline ModelConfig read_config(Reader& r) {
    ModelConfig cfg;
    cfg.levels = r.i32();
    cfg.points_per_level.resize(r.u32());
    for (auto& p : cfg.points_per_level) p = r.u64();
    cfg.feature_widths.resize(r.u32());
    for (auto& x : cfg.feature_widths) x = r.i32();
    cfg.cost_volume_widths.resize(r.u32());
    for (auto& x : cfg.cost_volume_widths) x = r.i32();
    cfg.occ_width = r.i32();
    cfg.k1 = r.i32();
    cfg.k2 = r.i32();
    cfg.k_conv = r.i32();
    cfg.k_up = r.i32();
    cfg.input_feature_dim = r.i32();
    cfg.cost_volume_mode = static_cast<CostVolumeMode>(r.u8());
    return cfg;
}

} // namespace ckpt

/// Everything needed to freeze and resume a run.
template <typename T>
struct Checkpoint {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor<T>>> param_buffers;
    AdamState<T> adam;
    std::uint64_t step = 0;
    Rng::State rng_state{};
};

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams<T>& params, const AdamState<T>& adam, std::uint64_t step,
                     const Rng& rng) {
    ckpt::Writer body;
    body.u32(ckpt::kVersion);
    ckpt::write_config(body, cfg);
    const auto& entries = params.entries();
    body.u32(static_cast<std::uint32_t>(entries.size()));
    auto put_tensor = [&body](const Tensor<T>& t) {
        std::vector<float> f(t.v.size());
        for (std::size_t i = 0; i < t.v.size(); ++i) f[i] = static_cast<float>(t.v[i]);
        body.f32s(f);
    };
    for (const auto& e : entries) {
        body.str(e.name);
        body.u32(static_cast<std::uint32_t>(e.value.shape().size()));
        for (auto d : e.value.shape()) body.u64(d);
        put_tensor(e.value.data());
    }
    for (std::size_t p = 0; p < entries.size(); ++p) put_tensor(adam.m[p]);
    for (std::size_t p = 0; p < entries.size(); ++p) put_tensor(adam.v[p]);
    body.u64(step);
    for (auto wstate : rng.state()) body.u64(wstate);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f.write(ckpt::kMagic, 4);
    f.write(body.bytes().data(), static_cast<std::streamsize>(body.bytes().size()));
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 || std::memcmp(buf.data(), ckpt::kMagic, 4) != 0)
        throw BadMagicError(path + ": not an OGCK checkpoint");
    ckpt::Reader r(buf.substr(4), path);
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw InconsistentFileError(path + ": unsupported checkpoint version " +
                                    std::to_string(version));
    Checkpoint<T> out;
    out.config = ckpt::read_config(r);
    const std::uint32_t count = r.u32();
    auto get_tensor = [&r](Shape shape) {
        auto fs = r.f32s(shape_numel(shape));
        Tensor<T> t(std::move(shape));
        for (std::size_t i = 0; i < fs.size(); ++i) t.v[i] = static_cast<T>(fs[i]);
        return t;
    };
    std::vector<Shape> shapes;
    for (std::uint32_t p = 0; p < count; ++p) {
        std::string name = r.str();
        Shape shape(r.u32());
        for (auto& d : shape) d = r.u64();
        shapes.push_back(shape);
        out.param_buffers.emplace_back(std::move(name), get_tensor(shape));
    }
    for (std::uint32_t p = 0; p < count; ++p) out.adam.m.push_back(get_tensor(shapes[p]));
    for (std::uint32_t p = 0; p < count; ++p) out.adam.v.push_back(get_tensor(shapes[p]));
    out.step = r.u64();
    out.adam.step = out.step;
    for (auto& wstate : out.rng_state) wstate = r.u64();
    if (r.remaining() != 0)
        throw InconsistentFileError(path + ": trailing bytes in checkpoint");
    return out;
}

// ---------------------------------------------------------------------------
// Training loops

enum class TrainMode { supervised, self_supervised };

template <typename T = float>
class TrainSession {
public:
    struct EpochStat {
        int epoch = 0;
        double mean_loss = 0.0;
        MetricsReport val;
        bool has_val = false;
        double synth_occ_accuracy = -1.0;
    };

    TrainSession(TrainMode mode, ModelConfig mcfg, TrainConfig tcfg, LossWeights<T> weights,
                 SyntheticPairSpec synth = {})
        : mode_(mode), mcfg_(std::move(mcfg)), tcfg_(tcfg), weights_(std::move(weights)),
          synth_(synth), rng_(derive_seed(tcfg.rng_seed, 0x5E5510)) {
        mcfg_.validate();
        tcfg_.validate();
        weights_.validate(mcfg_.levels);
        if (mode_ == TrainMode::self_supervised) synth_.validate();
        params_ = ModelParams<T>::init(mcfg_, tcfg_.rng_seed);
        adam_ = AdamState<T>::init(params_);
    }

    void set_data(const std::vector<ScenePair<T>>* train, const std::vector<ScenePair<T>>* val) {
        train_ = train;
        val_ = val;
        if (mode_ == TrainMode::supervised)
            for (const auto& p : *train_)
                if (!p.gt_flow)
                    throw ConfigError("supervised training needs gt_flow on every sample");
    }

    ModelParams<T>& params() { return params_; }
    const ModelConfig& model_config() const { return mcfg_; }
    const TrainConfig& train_config() const { return tcfg_; }
    std::uint64_t step() const { return step_; }
    const std::vector<double>& step_losses() const { return step_losses_; }
    const std::vector<EpochStat>& epoch_stats() const { return epoch_stats_; }
    void set_check_stop_gradient(bool on) { check_stop_gradient_ = on; }

    int steps_per_epoch() const {
        const int n = static_cast<int>(train_->size());
        return (n + tcfg_.batch_size - 1) / tcfg_.batch_size;
    }
    int total_steps() const {
        return tcfg_.max_steps > 0 ? tcfg_.max_steps : tcfg_.epochs * steps_per_epoch();
    }
    int epoch_of_step(std::uint64_t s) const {
        return static_cast<int>(s / static_cast<std::uint64_t>(steps_per_epoch()));
    }

    /// Runs one optimizer step over one sampled batch; returns the batch loss.
    double step_once() {
        const int epoch = epoch_of_step(step_);
        const double lr = lr_at(epoch, tcfg_);
        params_.zero_grads();

        Rng batch_rng(derive_seed(tcfg_.rng_seed, 0xBA7C4, step_));
        double loss_acc = 0.0;
        const T inv_batch = T(1) / static_cast<T>(tcfg_.batch_size);
        for (int b = 0; b < tcfg_.batch_size; ++b) {
            const std::size_t idx = batch_rng.uniform_index(train_->size());
            const ScenePair<T>& pair = (*train_)[idx];
            Value<T> loss = mode_ == TrainMode::supervised
                                ? sample_loss_supervised(pair, epoch, b)
                                : sample_loss_self_supervised(pair, epoch, b);
            loss_acc += static_cast<double>(loss.data().v[0]);
            backward(scale(loss, inv_batch));
        }
        adam_step(params_, adam_, lr, tcfg_);
        if (!params_.all_finite())
            throw NumericError("training step " + std::to_string(step_) +
                               " produced non-finite parameters (lr=" + std::to_string(lr) + ")");
        ++step_;
        const double mean_loss = loss_acc / tcfg_.batch_size;
        step_losses_.push_back(mean_loss);
        return mean_loss;
    }

    /// Runs to the configured total step count, recording per-epoch stats.
    void run() {
        const int total = total_steps();
        const int spe = steps_per_epoch();
        double epoch_loss = 0.0;
        int epoch_count = 0;
        while (step_ < static_cast<std::uint64_t>(total)) {
            epoch_loss += step_once();
            ++epoch_count;
            const bool epoch_end = (step_ % static_cast<std::uint64_t>(spe)) == 0;
            if (epoch_end || step_ == static_cast<std::uint64_t>(total)) {
                EpochStat st;
                st.epoch = epoch_of_step(step_ - 1);
                st.mean_loss = epoch_loss / std::max(1, epoch_count);
                if (val_ && !val_->empty()) {
                    st.val = evaluate(*val_);
                    st.has_val = true;
                    if (mode_ == TrainMode::self_supervised)
                        st.synth_occ_accuracy = synthetic_occlusion_accuracy(*val_);
                }
                epoch_stats_.push_back(st);
                epoch_loss = 0.0;
                epoch_count = 0;
            }
        }
    }

    /// Ground-truth metrics of the current model over a pair set (finest
    /// flow + thresholded occlusion). Deterministic FPS seeds.
    MetricsReport evaluate(const std::vector<ScenePair<T>>& pairs) {
        std::vector<MetricsReport> reports;
        for (const auto& pair : pairs) {
            if (!pair.gt_flow) throw ConfigError("evaluate: sample lacks gt_flow");
            ForwardOptions opt;
            auto result = model_forward(pair.source, pair.target, params_, mcfg_, opt);
            Tensor<T> gt_occ = pair.gt_occlusion
                                   ? *pair.gt_occlusion
                                   : Tensor<T>::full(Shape{pair.source.size()}, T(1));
            MetricsReport r = flow_metrics(result.finest().flow.data(), *pair.gt_flow, gt_occ);
            if (pair.gt_occlusion) {
                Tensor<T> occ = result.finest().occlusion.data();
                occ.shape = Shape{occ.numel()};
                r.occ_accuracy = occlusion_accuracy(occ, *pair.gt_occlusion);
                r.has_occ_accuracy = true;
            }
            reports.push_back(r);
        }
        return aggregate(reports);
    }

    /// Occlusion accuracy on freshly generated synthetic pairs built from
    /// the given samples' sources.
    double synthetic_occlusion_accuracy(const std::vector<ScenePair<T>>& pairs) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            SyntheticPairSpec spec = synth_;
            spec.rng_seed = derive_seed(tcfg_.rng_seed, 0xACC0, i);
            ScenePair<T> sp = make_synthetic_pair(pairs[i].source, spec);
            ForwardOptions opt;
            auto result = model_forward(sp.source, sp.target, params_, mcfg_, opt);
            Tensor<T> occ = result.finest().occlusion.data();
            occ.shape = Shape{occ.numel()};
            acc += occlusion_accuracy(occ, *sp.gt_occlusion);
            ++count;
        }
        return acc / static_cast<double>(count);
    }

    void save(const std::string& path) const {
        save_checkpoint(path, mcfg_, params_, adam_, step_, rng_);
    }

    /// Restores parameters, optimizer moments, step counter and RNG state.
    /// The stored model config must match this session's.
    void load(const std::string& path) {
        Checkpoint<T> ck = load_checkpoint<T>(path);
        if (!(ck.config == mcfg_))
            throw ConfigError(path + ": checkpoint model config does not match the session");
        auto& entries = params_.entries();
        if (ck.param_buffers.size() != entries.size())
            throw InconsistentFileError(path + ": parameter count mismatch");
        for (std::size_t p = 0; p < entries.size(); ++p) {
            if (ck.param_buffers[p].first != entries[p].name)
                throw InconsistentFileError(path + ": parameter name mismatch at index " +
                                            std::to_string(p));
            if (ck.param_buffers[p].second.shape != entries[p].value.shape())
                throw InconsistentFileError(path + ": parameter shape mismatch for " +
                                            entries[p].name);
            entries[p].value.data() = ck.param_buffers[p].second;
            entries[p].value.reset_grad();
        }
        adam_ = std::move(ck.adam);
        step_ = ck.step;
        rng_.set_state(ck.rng_state);
    }

private:
    ForwardOptions forward_options(std::uint64_t salt, bool detach_occ) const {
        ForwardOptions opt;
        opt.detach_occlusion_in_flow = detach_occ;
        if (!tcfg_.deterministic) {
            opt.fps_seed_source = derive_seed(tcfg_.rng_seed, 0xF9501, salt);
            opt.fps_seed_target = derive_seed(tcfg_.rng_seed, 0xF9502, salt);
        }
        return opt;
    }

    Value<T> sample_loss_supervised(const ScenePair<T>& pair, int /*epoch*/, int b) {
        const std::uint64_t salt = step_ * 64 + static_cast<std::uint64_t>(b);
        auto result = model_forward(pair.source, pair.target, params_, mcfg_,
                                    forward_options(salt, false));
        return supervised_loss(result, *pair.gt_flow, weights_.alpha);
    }

    /// Three inferences per sample (Fig. 2): (S,T) for forward occlusion and
    /// flow, (T,S) for backward occlusion, (S,T~) against the synthetic
    /// target for the flow/occlusion supervision. Ground truth of the real
    /// pair is never touched here.
    Value<T> sample_loss_self_supervised(const ScenePair<T>& pair, int epoch, int b) {
        const std::uint64_t salt = step_ * 64 + static_cast<std::uint64_t>(b);
        ForwardOptions fwd_opt = forward_options(salt, true);
        ForwardOptions bwd_opt = fwd_opt;
        std::swap(bwd_opt.fps_seed_source, bwd_opt.fps_seed_target);

        auto fwd = model_forward(pair.source, pair.target, params_, mcfg_, fwd_opt);
        auto bwd = model_forward(pair.target, pair.source, params_, mcfg_, bwd_opt);

        SyntheticPairSpec spec = synth_;
        spec.rng_seed = derive_seed(tcfg_.rng_seed, 0x517117, salt);
        ScenePair<T> sp = make_synthetic_pair(pair.source, spec);
        auto synth_fwd = model_forward(sp.source, sp.target, params_, mcfg_, fwd_opt);

        auto flows = flows_by_level(fwd);
        std::vector<Value<T>> warped;
        std::vector<Tensor<T>> target_pos;
        std::vector<IndexMatrix<T>> self_nbrs;
        for (int l = 0; l < mcfg_.levels; ++l) {
            warped.push_back(
                add(Value<T>::constant(fwd.source.levels[l].positions), flows[l]));
            target_pos.push_back(fwd.target.levels[l].positions);
            self_nbrs.push_back(fwd.source.levels[l].self_neighbors);
        }
        Value<T> chamfer = nonoccluded_chamfer(warped, target_pos, occlusions_by_level(fwd),
                                               occlusions_by_level(bwd), weights_.alpha);
        Value<T> reg = smoothness_reg(flows, self_nbrs, weights_.alpha);
        Value<T> synth_flow = flow_loss(flows_by_level(synth_fwd),
                                        subsample_per_level(synth_fwd.source, *sp.gt_flow),
                                        weights_.alpha);
        Tensor<T> synth_occ_gt = *sp.gt_occlusion;
        Value<T> synth_occ = occlusion_loss(occlusions_by_level(synth_fwd),
                                            subsample_per_level(synth_fwd.source, synth_occ_gt),
                                            weights_.alpha);

        if (check_stop_gradient_) assert_chamfer_stopgrad(chamfer);

        LossWeights<T> w = weights_;
        w.lambda_reg = static_cast<T>(lambda_reg_at(epoch, tcfg_));
        const bool synth_flow_enabled =
            epoch < tcfg_.synth_flow_epoch_fraction * tcfg_.epochs;
        return self_supervised_total(chamfer, reg, synth_flow, synth_occ, w,
                                     synth_flow_enabled);
    }

    /// Instrumentation: the chamfer term alone must not touch any occlusion
    /// predictor parameter.
    void assert_chamfer_stopgrad(const Value<T>& chamfer) {
        std::vector<Tensor<T>> saved;
        for (auto& e : params_.entries()) {
            saved.push_back(e.value.has_grad() ? e.value.grad() : Tensor<T>());
            e.value.reset_grad();
        }
        backward(chamfer);
        for (auto& e : params_.entries()) {
            if (e.name.rfind("occ", 0) != 0) continue;
            if (!e.value.has_grad()) continue;
            for (T g : e.value.grad().v)
                if (g != T(0))
                    throw NumericError("stop-gradient violation: chamfer gradient reached " +
                                       e.name);
        }
        auto& entries = params_.entries();
        for (std::size_t p = 0; p < entries.size(); ++p) {
            entries[p].value.reset_grad();
            if (!saved[p].v.empty()) entries[p].value.ensure_grad() = saved[p];
        }
    }

    TrainMode mode_;
    ModelConfig mcfg_;
    TrainConfig tcfg_;
    LossWeights<T> weights_;
    SyntheticPairSpec synth_;
    ModelParams<T> params_;
    AdamState<T> adam_;
    std::uint64_t step_ = 0;
    Rng rng_;
    const std::vector<ScenePair<T>>* train_ = nullptr;
    const std::vector<ScenePair<T>>* val_ = nullptr;
    std::vector<double> step_losses_;
    std::vector<EpochStat> epoch_stats_;
    bool check_stop_gradient_ = false;
};

} // namespace ogflow
