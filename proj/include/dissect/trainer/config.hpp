#pragma once

// Flat key=value run configuration. Every key is namespaced (data.*,
// augment.*, encoder.*, vq.*, serf.*, objective.*, momentum.*, train.*,
// variant.*, probe.*, finetune.*). Unknown keys are errors, and
// serialization writes every key so a round trip reproduces the config.

#include "dissect/core/error.hpp"
#include "dissect/core/kv.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/datagen/augment.hpp"
#include "dissect/datagen/phantom.hpp"
#include "dissect/nn/encoder.hpp"
#include "dissect/objective/objective.hpp"
#include "dissect/serf/serf.hpp"
#include "dissect/vq/codebook.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace dissect::trainer {

enum class OptimizerKind { lars, sgd };
enum class SerfGradMode { align, vq_only, frozen };
enum class SerfVariant { full, concat, off };

struct VqConfig {
    std::array<int, 3> entries{128, 128, 128};  // coarse, medium, fine
    double decay = 0.99;
    double epsilon = 1e-5;
    double beta = 0.25;
    vq::EmaMode mode = vq::EmaMode::literal;
    bool dead_code_reinit = false;
};

struct SerfSettings {
    std::array<double, 3> alpha{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // coarse, medium, fine
    bool trainable_alpha = false;
    serf::RefineMode mode = serf::RefineMode::token_value;
    SerfGradMode grad_mode = SerfGradMode::align;
};

struct MomentumSettings {
    double mu_base = 0.996;
    double mu_final = 1.0;
};

struct TrainSettings {
    int epochs = 50;
    int batch_size = 64;
    OptimizerKind optimizer = OptimizerKind::lars;
    double base_lr = 0.3;
    double opt_momentum = 0.99;
    double weight_decay = 1.5e-6;
    double trust_coefficient = 0.001;
    double warmup_epochs = 10;
    double floor_lr = 0.0;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
    int log_every = 1;         // steps
    int threads = 1;
};

struct VariantSettings {
    SerfVariant serf = SerfVariant::full;
    bool post_serf_head = true;
    std::array<bool, 3> scales{true, true, true};  // coarse, medium, fine
    objective::Targets targets = objective::Targets::both;
    bool momentum = true;
};

struct ProbeSettings {
    std::vector<double> fractions{0.01, 0.05, 0.10, 0.20, 0.30, 0.40};
    int seeds = 3;
    int epochs = 5000;   // full-batch gradient steps cap
    double lr = 0.0;     // 0 picks 1/L from the feature spectrum
    double l2 = 1e-3;
    double grad_tol = 1e-5;
    int position_images = 300;
};

struct FinetuneSettings {
    int epochs = 20;
    double lr_scale = 0.01;  // fraction of train.base_lr
    int batch_size = 32;
    double momentum = 0.9;
};

struct Config {
    int data_num = 2000;
    datagen::PhantomSpec phantom;  // phantom.seed is derived from train.seed
    datagen::AugmentConfig augment;
    nn::EncoderConfig encoder;
    VqConfig vq;
    SerfSettings serf;
    double lambda = 1.0;
    MomentumSettings momentum;
    TrainSettings train;
    VariantSettings variant;
    ProbeSettings probe;
    FinetuneSettings finetune;

    void validate() const;

    // Derived component settings.
    datagen::PhantomSpec phantom_spec() const {
        datagen::PhantomSpec s = phantom;
        s.image_size = encoder.input_size;
        s.seed = stream_seed(train.seed, "data");
        return s;
    }
    serf::SerfConfig serf_config() const;
    int active_scales() const { return variant.scales[0] + variant.scales[1] + variant.scales[2]; }
};

namespace detail {

inline std::string join_ints(const std::array<int, 3>& v) {
    return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline std::array<int, 3> parse_int3(const std::string& key, const std::string& v) {
    const auto parts = split(v, ',');
    if (parts.size() == 1) {
        const int x = static_cast<int>(parse_int(key, parts[0]));
        return {x, x, x};
    }
    if (parts.size() != 3) throw ConfigError("key '" + key + "': expected one or three comma-separated integers");
    return {static_cast<int>(parse_int(key, parts[0])), static_cast<int>(parse_int(key, parts[1])),
            static_cast<int>(parse_int(key, parts[2]))};
}

template <typename E>
struct EnumName {
    E value;
    const char* name;
};

template <typename E, std::size_t N>
E parse_enum(const std::string& key, const std::string& v, const std::array<EnumName<E>, N>& names) {
    std::string allowed;
    for (const auto& n : names) {
        if (v == n.name) return n.value;
        allowed += (allowed.empty() ? "" : "|") + std::string(n.name);
    }
    throw ConfigError("key '" + key + "': unknown value '" + v + "' (expected " + allowed + ")");
}

template <typename E, std::size_t N>
std::string enum_name(E value, const std::array<EnumName<E>, N>& names) {
    for (const auto& n : names)
        if (n.value == value) return n.name;
    return "?";
}

inline constexpr std::array<EnumName<OptimizerKind>, 2> kOptimizers{{{OptimizerKind::lars, "lars"},
                                                                      {OptimizerKind::sgd, "sgd"}}};
inline constexpr std::array<EnumName<SerfGradMode>, 3> kGradModes{
    {{SerfGradMode::align, "align"}, {SerfGradMode::vq_only, "vq_only"}, {SerfGradMode::frozen, "frozen"}}};
inline constexpr std::array<EnumName<SerfVariant>, 3> kSerfVariants{
    {{SerfVariant::full, "full"}, {SerfVariant::concat, "concat"}, {SerfVariant::off, "off"}}};
inline constexpr std::array<EnumName<vq::EmaMode>, 2> kEmaModes{
    {{vq::EmaMode::literal, "literal"}, {vq::EmaMode::count_weighted, "count_weighted"}}};
inline constexpr std::array<EnumName<serf::RefineMode>, 2> kRefineModes{
    {{serf::RefineMode::token_value, "token_value"}, {serf::RefineMode::paper_literal, "paper_literal"}}};
inline constexpr std::array<EnumName<objective::Targets>, 3> kTargets{{{objective::Targets::both, "both"},
                                                                        {objective::Targets::h_phi, "h_phi"},
                                                                        {objective::Targets::q_t, "q_t"}}};

inline std::string scales_string(const std::array<bool, 3>& s) {
    std::string out;
    if (s[0]) out += 'c';
    if (s[1]) out += 'm';
    if (s[2]) out += 'f';
    return out;
}

inline std::array<bool, 3> parse_scales(const std::string& key, const std::string& v) {
    std::array<bool, 3> s{false, false, false};
    for (char ch : v) {
        const int j = ch == 'c' ? 0 : ch == 'm' ? 1 : ch == 'f' ? 2 : -1;
        if (j < 0 || s[static_cast<std::size_t>(j)])
            throw ConfigError("key '" + key + "': expected a subset of 'cmf', got '" + v + "'");
        s[static_cast<std::size_t>(j)] = true;
    }
    if (!s[0] && !s[1] && !s[2]) throw ConfigError("key '" + key + "': at least one scale must be active");
    return s;
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : ",") + format_double(x);
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

#define DISSECT_DOUBLE(KEY, MEMBER)                                                              \
    Field{KEY, [](const Config& c) { return format_double(c.MEMBER); },                         \
          [](Config& c, const std::string& v) { c.MEMBER = parse_double(KEY, v); }}
#define DISSECT_INT(KEY, MEMBER)                                                                 \
    Field{KEY, [](const Config& c) { return std::to_string(c.MEMBER); },                        \
          [](Config& c, const std::string& v) { c.MEMBER = static_cast<int>(parse_int(KEY, v)); }}
#define DISSECT_BOOL(KEY, MEMBER)                                                                \
    Field{KEY, [](const Config& c) { return std::string(c.MEMBER ? "true" : "false"); },        \
          [](Config& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }}
#define DISSECT_ONOFF(KEY, MEMBER)                                                               \
    Field{KEY, [](const Config& c) { return std::string(c.MEMBER ? "on" : "off"); },            \
          [](Config& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }}
#define DISSECT_ENUM(KEY, MEMBER, TABLE)                                                         \
    Field{KEY, [](const Config& c) { return enum_name(c.MEMBER, TABLE); },                      \
          [](Config& c, const std::string& v) { c.MEMBER = parse_enum(KEY, v, TABLE); }}

inline const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        DISSECT_INT("data.num", data_num),
        DISSECT_DOUBLE("data.anatomy_jitter", phantom.anatomy_jitter),
        DISSECT_INT("data.lesion_count_min", phantom.lesion_count_min),
        DISSECT_INT("data.lesion_count_max", phantom.lesion_count_max),
        DISSECT_DOUBLE("data.lesion_radius_min", phantom.lesion_radius_min),
        DISSECT_DOUBLE("data.lesion_radius_max", phantom.lesion_radius_max),
        DISSECT_DOUBLE("data.lesion_intensity_min", phantom.lesion_intensity_min),
        DISSECT_DOUBLE("data.lesion_intensity_max", phantom.lesion_intensity_max),
        DISSECT_DOUBLE("data.noise_sigma", phantom.noise_sigma),

        DISSECT_DOUBLE("augment.crop_scale_min", augment.crop_scale_min),
        DISSECT_DOUBLE("augment.crop_scale_max", augment.crop_scale_max),
        DISSECT_DOUBLE("augment.flip_prob", augment.flip_prob),
        DISSECT_DOUBLE("augment.blur_sigma_min", augment.blur_sigma_min),
        DISSECT_DOUBLE("augment.blur_sigma_max", augment.blur_sigma_max),
        DISSECT_DOUBLE("augment.blur_prob", augment.blur_prob),
        DISSECT_DOUBLE("augment.normalize_mean", augment.normalize_mean),
        DISSECT_DOUBLE("augment.normalize_std", augment.normalize_std),

        DISSECT_INT("encoder.input_size", encoder.input_size),
        Field{"encoder.stage_channels", [](const Config& c) { return join_ints(c.encoder.stage_channels); },
              [](Config& c, const std::string& v) {
                  c.encoder.stage_channels = parse_int3("encoder.stage_channels", v);
              }},
        DISSECT_INT("encoder.embed_dim", encoder.embed_dim),
        DISSECT_INT("encoder.proj_hidden", encoder.proj_hidden),
        DISSECT_INT("encoder.proj_out", encoder.proj_out),
        DISSECT_INT("encoder.norm_groups", encoder.norm_groups),
        DISSECT_BOOL("encoder.tap_pre_activation", encoder.tap_pre_activation),

        Field{"vq.entries", [](const Config& c) { return join_ints(c.vq.entries); },
              [](Config& c, const std::string& v) { c.vq.entries = parse_int3("vq.entries", v); }},
        DISSECT_DOUBLE("vq.decay", vq.decay),
        DISSECT_DOUBLE("vq.epsilon", vq.epsilon),
        DISSECT_DOUBLE("vq.beta", vq.beta),
        DISSECT_ENUM("vq.mode", vq.mode, kEmaModes),
        DISSECT_BOOL("vq.dead_code_reinit", vq.dead_code_reinit),

        DISSECT_DOUBLE("serf.alpha_c", serf.alpha[0]),
        DISSECT_DOUBLE("serf.alpha_m", serf.alpha[1]),
        DISSECT_DOUBLE("serf.alpha_f", serf.alpha[2]),
        DISSECT_BOOL("serf.trainable_alpha", serf.trainable_alpha),
        DISSECT_ENUM("serf.mode", serf.mode, kRefineModes),
        DISSECT_ENUM("serf.grad_mode", serf.grad_mode, kGradModes),

        DISSECT_DOUBLE("objective.lambda", lambda),

        DISSECT_DOUBLE("momentum.mu_base", momentum.mu_base),
        DISSECT_DOUBLE("momentum.mu_final", momentum.mu_final),

        DISSECT_INT("train.epochs", train.epochs),
        DISSECT_INT("train.batch_size", train.batch_size),
        DISSECT_ENUM("train.optimizer", train.optimizer, kOptimizers),
        DISSECT_DOUBLE("train.base_lr", train.base_lr),
        DISSECT_DOUBLE("train.opt_momentum", train.opt_momentum),
        DISSECT_DOUBLE("train.weight_decay", train.weight_decay),
        DISSECT_DOUBLE("train.trust_coefficient", train.trust_coefficient),
        DISSECT_DOUBLE("train.warmup_epochs", train.warmup_epochs),
        DISSECT_DOUBLE("train.floor_lr", train.floor_lr),
        Field{"train.seed", [](const Config& c) { return std::to_string(c.train.seed); },
              [](Config& c, const std::string& v) { c.train.seed = parse_u64("train.seed", v); }},
        DISSECT_INT("train.checkpoint_every", train.checkpoint_every),
        DISSECT_INT("train.log_every", train.log_every),
        DISSECT_INT("train.threads", train.threads),

        DISSECT_ENUM("variant.serf", variant.serf, kSerfVariants),
        DISSECT_ONOFF("variant.post_serf_head", variant.post_serf_head),
        Field{"variant.scales", [](const Config& c) { return scales_string(c.variant.scales); },
              [](Config& c, const std::string& v) { c.variant.scales = parse_scales("variant.scales", v); }},
        DISSECT_ENUM("variant.targets", variant.targets, kTargets),
        DISSECT_ONOFF("variant.momentum", variant.momentum),

        Field{"probe.fractions", [](const Config& c) { return join_doubles(c.probe.fractions); },
              [](Config& c, const std::string& v) {
                  c.probe.fractions.clear();
                  for (const auto& part : split(v, ',')) c.probe.fractions.push_back(parse_double("probe.fractions", part));
              }},
        DISSECT_INT("probe.seeds", probe.seeds),
        DISSECT_INT("probe.epochs", probe.epochs),
        DISSECT_DOUBLE("probe.lr", probe.lr),
        DISSECT_DOUBLE("probe.l2", probe.l2),
        DISSECT_DOUBLE("probe.grad_tol", probe.grad_tol),
        DISSECT_INT("probe.position_images", probe.position_images),

        DISSECT_INT("finetune.epochs", finetune.epochs),
        DISSECT_DOUBLE("finetune.lr_scale", finetune.lr_scale),
        DISSECT_INT("finetune.batch_size", finetune.batch_size),
        DISSECT_DOUBLE("finetune.momentum", finetune.momentum),
    };
    return table;
}

#undef DISSECT_DOUBLE
#undef DISSECT_INT
#undef DISSECT_BOOL
#undef DISSECT_ONOFF
#undef DISSECT_ENUM

}  // namespace detail

inline void Config::validate() const {
    if (data_num < 1) throw ConfigError("data.num must be >= 1");
    phantom_spec().validate();
    augment.validate();
    encoder.validate();
    if (encoder.embed_dim != encoder.proj_out)
        throw ConfigError("encoder.embed_dim must equal encoder.proj_out (targets share one space)");
    for (int n : vq.entries)
        if (n < 2) throw ConfigError("vq.entries must be >= 2");
    if (!(vq.decay >= 0.0 && vq.decay < 1.0)) throw ConfigError("vq.decay must lie in [0, 1)");
    if (!(vq.epsilon > 0.0)) throw ConfigError("vq.epsilon must be > 0");
    if (!(vq.beta >= 0.0)) throw ConfigError("vq.beta must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("objective.lambda must be >= 0");
    if (!(momentum.mu_base >= 0.0 && momentum.mu_base <= momentum.mu_final && momentum.mu_final <= 1.0))
        throw ConfigError("momentum schedule needs 0 <= mu_base <= mu_final <= 1");
    if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(train.base_lr >= 0.0) || !(train.floor_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (!(train.opt_momentum >= 0.0 && train.opt_momentum < 1.0)) throw ConfigError("train.opt_momentum must lie in [0, 1)");
    if (!(train.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(train.trust_coefficient > 0.0)) throw ConfigError("train.trust_coefficient must be > 0");
    if (!(train.warmup_epochs >= 0.0)) throw ConfigError("train.warmup_epochs must be >= 0");
    if (train.checkpoint_every < 0 || train.log_every < 1) throw ConfigError("invalid logging/checkpoint cadence");
    if (train.threads < 1) throw ConfigError("train.threads must be >= 1");
    if (probe.fractions.empty()) throw ConfigError("probe.fractions must not be empty");
    for (double f : probe.fractions)
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("probe.fractions must lie in (0, 1]");
    if (probe.seeds < 1 || probe.epochs < 0 || !(probe.l2 >= 0.0) || !(probe.lr >= 0.0) || probe.position_images < 1)
        throw ConfigError("invalid probe settings");
    if (finetune.epochs < 0 || finetune.batch_size < 1 || !(finetune.lr_scale >= 0.0) ||
        !(finetune.momentum >= 0.0 && finetune.momentum < 1.0))
        throw ConfigError("invalid finetune settings");
    serf_config().validate();
}

inline serf::SerfConfig Config::serf_config() const {
    serf::SerfConfig s;
    s.alpha = serf.alpha;
    if (active_scales() < 3) {
        double total = 0;
        for (int j = 0; j < 3; ++j)
            if (variant.scales[static_cast<std::size_t>(j)]) total += serf.alpha[static_cast<std::size_t>(j)];
        for (int j = 0; j < 3; ++j) {
            const auto i = static_cast<std::size_t>(j);
            s.alpha[i] = variant.scales[i] ? (total > 0 ? serf.alpha[i] / total : 1.0 / active_scales()) : 0.0;
        }
    }
    s.trainable_alpha = serf.trainable_alpha;
    s.mode = variant.serf == SerfVariant::off ? serf::RefineMode::paper_literal : serf.mode;
    s.fusion = variant.serf == SerfVariant::concat ? serf::Fusion::concat : serf::Fusion::full;
    s.post_head = variant.post_serf_head;
    s.dim = encoder.embed_dim;
    s.hidden = encoder.proj_hidden;
    return s;
}

inline KeyValues to_kv(const Config& c) {
    KeyValues kv;
    for (const auto& f : detail::fields()) kv.set(f.key, f.get(c));
    return kv;
}

inline std::string to_string(const Config& c) { return to_kv(c).to_string(); }

// Applies kv on top of base. Unknown keys raise ConfigError.
inline Config apply(Config base, const KeyValues& kv) {
    const auto& table = detail::fields();
    for (const auto& [key, value] : kv.entries()) {
        auto it = std::find_if(table.begin(), table.end(), [&](const detail::Field& f) { return f.key == key; });
        if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
        it->set(base, value);
    }
    return base;
}

inline Config from_kv(const KeyValues& kv) {
    Config c = apply(Config{}, kv);
    c.validate();
    return c;
}

inline Config load_config(const std::string& path) { return from_kv(KeyValues::load(path)); }

inline std::uint64_t config_hash(const Config& c) { return fnv1a64(to_string(c)); }

inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& f : detail::fields()) k.push_back(f.key);
        return k;
    }();
    return keys;
}

}  // namespace dissect::trainer
