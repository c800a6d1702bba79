#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/checkpoint.hpp"
#include "cagan/gan.hpp"

namespace cagan {

// Exit-code taxonomy for the command-line harness.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;  // exit code 2
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;  // exit code 3
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;  // exit code 4
};

// Fully resolved run configuration. A profile fills the defaults, explicit
// keys override, and the resolved result is serialized next to every
// checkpoint so a run can be reproduced from the file alone.
struct RunConfig {
    std::string profile = "desk";
    std::string variant = "se";  // "se" or "l+se"
    std::uint64_t seed = 1;

    // model dimensions
    std::size_t embed_dim = 32;
    std::size_t max_len = 18;
    std::size_t stage_h0 = 16;
    std::size_t base_channels = 32;
    std::size_t d_channels = 32;
    std::size_t nz = 100;

    // attention
    std::size_t r = 1;
    double lambda = 5.0;
    double kl_weight = 1.0;
    std::size_t lattn_extent = 3;
    std::string placement = "";  // comma-separated sites; empty for SE

    // matching loss temperatures
    double gamma1 = 4.0, gamma2 = 5.0, gamma3 = 10.0;

    // schedules
    std::size_t epochs = 6;
    std::size_t batch = 20;
    double lr = 0.0002;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::size_t damsm_epochs = 6;
    double damsm_lr = 0.001;
    std::size_t evalnet_epochs = 4;
    double evalnet_lr = 0.001;
    std::size_t max_steps = 0;  // 0 = full schedule; >0 caps GAN/DAMSM steps (smoke runs)

    // evaluation
    std::size_t eval_every = 2;
    std::size_t eval_samples = 400;
    std::size_t n_splits = 10;

    // dataset
    std::size_t n_train = 2000;
    std::size_t n_test = 400;

    int threads = 0;  // 0 = leave the OpenMP default

    static RunConfig for_profile(const std::string& profile, const std::string& variant) {
        RunConfig c;
        c.variant = variant;
        c.profile = profile;
        const bool local = variant == "l+se";
        if (variant != "se" && variant != "l+se")
            throw ConfigError("unknown variant '" + variant + "' (want se or l+se)");
        if (profile == "desk") {
            c.r = local ? 4 : 1;
            c.lambda = 5.0;
        } else if (profile == "paper-cub") {
            c.embed_dim = 256;
            c.max_len = 18;
            c.stage_h0 = 64;
            c.base_channels = 64;
            c.d_channels = 64;
            c.epochs = 600;
            c.damsm_epochs = 30;
            c.r = local ? 4 : 1;
            c.lambda = local ? 5.0 : 0.1;
            c.eval_every = 10;
            c.eval_samples = 3000;
            c.n_train = 8855;
            c.n_test = 2933;
        } else if (profile == "paper-coco") {
            c.embed_dim = 256;
            c.max_len = 12;
            c.stage_h0 = 64;
            c.base_channels = 64;
            c.d_channels = 64;
            c.epochs = 200;
            c.damsm_epochs = 30;
            c.r = local ? 4 : 1;
            c.lambda = 50.0;
            c.eval_every = 10;
            c.eval_samples = 30000;
            c.n_train = 82783;
            c.n_test = 40504;
        } else {
            throw ConfigError("unknown profile '" + profile + "'");
        }
        if (local) c.placement = "f0.up0,f1.attn,f2.attn";
        return c;
    }

    void set(const std::string& key, const std::string& value) {
        auto as_u = [&](const std::string& v) -> std::uint64_t {
            try {
                return std::stoull(v);
            } catch (const std::exception&) {
                throw ConfigError("bad integer for " + key + ": " + v);
            }
        };
        auto as_d = [&](const std::string& v) -> double {
            try {
                return std::stod(v);
            } catch (const std::exception&) {
                throw ConfigError("bad number for " + key + ": " + v);
            }
        };
        if (key == "profile") profile = value;
        else if (key == "variant") variant = value;
        else if (key == "seed") seed = as_u(value);
        else if (key == "embed_dim") embed_dim = as_u(value);
        else if (key == "max_len") max_len = as_u(value);
        else if (key == "stage_h0") stage_h0 = as_u(value);
        else if (key == "base_channels") base_channels = as_u(value);
        else if (key == "d_channels") d_channels = as_u(value);
        else if (key == "nz") nz = as_u(value);
        else if (key == "r") r = as_u(value);
        else if (key == "lambda") lambda = as_d(value);
        else if (key == "kl_weight") kl_weight = as_d(value);
        else if (key == "lattn_extent") lattn_extent = as_u(value);
        else if (key == "placement") placement = value == "none" ? "" : value;
        else if (key == "gamma1") gamma1 = as_d(value);
        else if (key == "gamma2") gamma2 = as_d(value);
        else if (key == "gamma3") gamma3 = as_d(value);
        else if (key == "epochs") epochs = as_u(value);
        else if (key == "batch") batch = as_u(value);
        else if (key == "lr") lr = as_d(value);
        else if (key == "beta1") beta1 = as_d(value);
        else if (key == "beta2") beta2 = as_d(value);
        else if (key == "damsm_epochs") damsm_epochs = as_u(value);
        else if (key == "damsm_lr") damsm_lr = as_d(value);
        else if (key == "evalnet_epochs") evalnet_epochs = as_u(value);
        else if (key == "evalnet_lr") evalnet_lr = as_d(value);
        else if (key == "max_steps") max_steps = as_u(value);
        else if (key == "eval_every") eval_every = as_u(value);
        else if (key == "eval_samples") eval_samples = as_u(value);
        else if (key == "n_splits") n_splits = as_u(value);
        else if (key == "n_train") n_train = as_u(value);
        else if (key == "n_test") n_test = as_u(value);
        else if (key == "threads") threads = static_cast<int>(as_u(value));
        else throw ConfigError("unknown config key '" + key + "'");
    }

    void validate() const {
        if (variant != "se" && variant != "l+se") throw ConfigError("variant must be se or l+se");
        if (embed_dim % 2 != 0) throw ConfigError("embed_dim must be even");
        if (batch < 2) throw ConfigError("batch must be >= 2 (the matching loss needs pairs)");
        if (stage_h0 < 8 || (stage_h0 & (stage_h0 - 1)) != 0)
            throw ConfigError("stage_h0 must be a power of two >= 8");
        if (lambda < 0) throw ConfigError("lambda must be nonnegative");
        if (r == 0) throw ConfigError("r must be positive");
        if (eval_samples % n_splits != 0)
            throw ConfigError("eval_samples must be divisible by n_splits");
        if (lattn_extent % 2 == 0) throw ConfigError("lattn_extent must be odd");
        if (variant == "se" && !placement.empty())
            throw ConfigError("SE variant takes no local-attention placement");
    }

    ModelVariant variant_config() const {
        ModelVariant v;
        v.kind = variant == "l+se" ? VariantKind::LocalPlusSE : VariantKind::SE;
        v.r = r;
        v.lambda = lambda;
        v.stage_h0 = stage_h0;
        v.lattn_extent = lattn_extent;
        v.placement.clear();
        std::istringstream ps(placement);
        std::string site;
        while (std::getline(ps, site, ','))
            if (!site.empty()) v.placement.insert(site);
        v.validate();
        return v;
    }

    std::size_t final_resolution() const { return stage_h0 * 4; }

    DamsmTemperatures temperatures() const { return {gamma1, gamma2, gamma3}; }

    AdamConfig gan_adam() const { return {lr, beta1, beta2, 1e-8}; }

    std::string serialize() const {
        std::ostringstream os;
        os.precision(17);
        os << "profile = " << profile << "\n";
        os << "variant = " << variant << "\n";
        os << "seed = " << seed << "\n";
        os << "embed_dim = " << embed_dim << "\n";
        os << "max_len = " << max_len << "\n";
        os << "stage_h0 = " << stage_h0 << "\n";
        os << "base_channels = " << base_channels << "\n";
        os << "d_channels = " << d_channels << "\n";
        os << "nz = " << nz << "\n";
        os << "r = " << r << "\n";
        os << "lambda = " << lambda << "\n";
        os << "kl_weight = " << kl_weight << "\n";
        os << "lattn_extent = " << lattn_extent << "\n";
        os << "placement = " << (placement.empty() ? "none" : placement) << "\n";
        os << "gamma1 = " << gamma1 << "\n";
        os << "gamma2 = " << gamma2 << "\n";
        os << "gamma3 = " << gamma3 << "\n";
        os << "epochs = " << epochs << "\n";
        os << "batch = " << batch << "\n";
        os << "lr = " << lr << "\n";
        os << "beta1 = " << beta1 << "\n";
        os << "beta2 = " << beta2 << "\n";
        os << "damsm_epochs = " << damsm_epochs << "\n";
        os << "damsm_lr = " << damsm_lr << "\n";
        os << "evalnet_epochs = " << evalnet_epochs << "\n";
        os << "evalnet_lr = " << evalnet_lr << "\n";
        os << "max_steps = " << max_steps << "\n";
        os << "eval_every = " << eval_every << "\n";
        os << "eval_samples = " << eval_samples << "\n";
        os << "n_splits = " << n_splits << "\n";
        os << "n_train = " << n_train << "\n";
        os << "n_test = " << n_test << "\n";
        os << "threads = " << threads << "\n";
        return os.str();
    }

    std::uint64_t hash() const {
        const std::string s = serialize();
        return fnv1a(s.data(), s.size());
    }
};

// "key = value" lines; '#' starts a comment. Returns raw pairs so callers
// can resolve profile/variant before the remaining keys.
inline std::vector<std::pair<std::string, std::string>> parse_config_pairs(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!key.empty()) out.emplace_back(key, value);
    }
    return out;
}

// Resolution order: profile/variant picked from (overrides > file > default),
// profile defaults applied, then file keys, then override keys.
inline RunConfig resolve_config(const std::vector<std::pair<std::string, std::string>>& file_pairs,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
    std::string profile = "desk", variant = "se";
    for (const auto& [k, v] : file_pairs) {
        if (k == "profile") profile = v;
        if (k == "variant") variant = v;
    }
    for (const auto& [k, v] : overrides) {
        if (k == "profile") profile = v;
        if (k == "variant") variant = v;
    }
    RunConfig cfg = RunConfig::for_profile(profile, variant);
    for (const auto& [k, v] : file_pairs)
        if (k != "profile" && k != "variant") cfg.set(k, v);
    for (const auto& [k, v] : overrides)
        if (k != "profile" && k != "variant") cfg.set(k, v);
    cfg.validate();
    return cfg;
}

}  // namespace cagan
