#include "efdit/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace efdit {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& section, const std::string& key,
                     const std::string& value) {
    const std::string full = section + "." + key;
    if (section == "model") {
        if (key == "patch") cfg.model.patch = to_int(full, value);
        else if (key == "d_model") cfg.model.d_model = to_int(full, value);
        else if (key == "blocks") cfg.model.blocks = to_int(full, value);
        else if (key == "heads") cfg.model.heads = to_int(full, value);
        else if (key == "mlp_ratio") cfg.model.mlp_ratio = to_int(full, value);
        else if (key == "time_embed_dim") cfg.model.time_embed_dim = to_int(full, value);
        else if (key == "attn") {
            if (value == "pro") cfg.model.pro_attention = true;
            else if (value == "full") cfg.model.pro_attention = false;
            else throw ConfigError("config: model.attn must be 'pro' or 'full', got '" + value + "'");
        } else if (key == "attn_c") cfg.model.attn_c = to_real(full, value);
        else if (key == "drop_sub") cfg.model.drop_prob_sub = to_real(full, value);
        else if (key == "drop_super") cfg.model.drop_prob_super = to_real(full, value);
        else if (key == "super_embedding") cfg.model.super_embedding = to_bool(full, value);
        else if (key == "init_seed") cfg.model.init_seed =
            static_cast<std::uint64_t>(to_int(full, value));
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "schedule") {
        if (key == "t") cfg.schedule_t = static_cast<int>(to_int(full, value));
        else if (key == "beta_start") cfg.beta_start = to_real(full, value);
        else if (key == "beta_end") cfg.beta_end = to_real(full, value);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "guidance") {
        if (key == "gamma") cfg.guidance.gamma = to_real(full, value);
        else if (key == "t_split") cfg.t_split_raw = static_cast<int>(to_int(full, value));
        else if (key == "w_sub") cfg.guidance.w_sub = to_real(full, value);
        else if (key == "w_super") cfg.guidance.w_super = to_real(full, value);
        else if (key == "d0") cfg.d0_raw = to_real(full, value);
        else if (key == "steps") cfg.sample_steps_raw = static_cast<int>(to_int(full, value));
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "loss") {
        if (key == "lambda1") cfg.loss.lambda1 = to_real(full, value);
        else if (key == "lambda2") cfg.loss.lambda2 = to_real(full, value);
        else if (key == "kl_temperature") cfg.loss.kl_temperature = to_real(full, value);
        else if (key == "aux_all_steps") cfg.loss.aux_all_steps = to_bool(full, value);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "data") {
        if (key == "n_super") cfg.data.n_super = static_cast<int>(to_int(full, value));
        else if (key == "subs_per_super") cfg.data.subs_per_super =
            static_cast<int>(to_int(full, value));
        else if (key == "samples_per_sub") cfg.data.samples_per_sub =
            static_cast<int>(to_int(full, value));
        else if (key == "height") cfg.data.height = to_int(full, value);
        else if (key == "width") cfg.data.width = to_int(full, value);
        else if (key == "channels") cfg.data.channels = to_int(full, value);
        else if (key == "seed") cfg.data.seed = static_cast<std::uint64_t>(to_int(full, value));
        else throw ConfigError("config: unknown key '" + full + "'");
    } else if (section == "train") {
        if (key == "steps") cfg.train.steps = static_cast<int>(to_int(full, value));
        else if (key == "batch") cfg.train.batch = static_cast<int>(to_int(full, value));
        else if (key == "lr") cfg.train.lr = to_real(full, value);
        else if (key == "optimizer") {
            if (value == "adam") cfg.train.optimizer = TrainSettings::Opt::adam;
            else if (value == "sgd") cfg.train.optimizer = TrainSettings::Opt::sgd;
            else throw ConfigError("config: train.optimizer must be 'adam' or 'sgd', got '" +
                                   value + "'");
        } else if (key == "momentum") cfg.train.momentum = to_real(full, value);
        else if (key == "adam_beta1") cfg.train.adam_beta1 = to_real(full, value);
        else if (key == "adam_beta2") cfg.train.adam_beta2 = to_real(full, value);
        else if (key == "adam_eps") cfg.train.adam_eps = to_real(full, value);
        else if (key == "seed") cfg.train.seed = static_cast<std::uint64_t>(to_int(full, value));
        else if (key == "checkpoint_every") cfg.train.checkpoint_every =
            static_cast<int>(to_int(full, value));
        else if (key == "grad_clip") cfg.train.grad_clip = to_real(full, value);
        else throw ConfigError("config: unknown key '" + full + "'");
    } else {
        throw ConfigError("config: unknown section '" + section + "'");
    }
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed section");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": key '" + key +
                              "' outside any section");
        }
        apply_config_kv(base, section, key, value);
    }
    return base;
}

void RunConfig::finalize() {
    model.height = data.height;
    model.width = data.width;
    model.channels = data.channels;
    model.n_sub = data.n_sub();
    model.n_super = data.n_super;
    guidance.t_split = t_split_raw >= 0 ? t_split_raw : std::max(1, schedule_t / 5);
    guidance.d0 = d0_raw > 0.0 ? d0_raw
                               : static_cast<double>(std::min(data.height, data.width)) / 8.0;
    guidance.steps = sample_steps_raw > 0 ? sample_steps_raw : schedule_t;
    if (guidance.gamma < 0.0 || guidance.gamma > 1.0) {
        throw ConfigError("guidance.gamma must lie in [0, 1]");
    }
    if (guidance.t_split > schedule_t) {
        throw ConfigError("guidance.t_split must not exceed schedule.t");
    }
    if (model.drop_prob_sub < 0.0 || model.drop_prob_sub >= 1.0 ||
        model.drop_prob_super < 0.0 || model.drop_prob_super >= 1.0) {
        throw ConfigError("model drop probabilities must lie in [0, 1)");
    }
    if (loss.lambda1 < 0.0 || loss.lambda2 < 0.0) {
        throw ConfigError("loss weights must be nonnegative");
    }
}

NoiseSchedule RunConfig::make_schedule() const {
    return NoiseSchedule::linear(schedule_t, beta_start, beta_end);
}

std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "[model]\n";
    os << "patch = " << cfg.model.patch << "\n";
    os << "d_model = " << cfg.model.d_model << "\n";
    os << "blocks = " << cfg.model.blocks << "\n";
    os << "heads = " << cfg.model.heads << "\n";
    os << "mlp_ratio = " << cfg.model.mlp_ratio << "\n";
    os << "time_embed_dim = " << cfg.model.time_embed_dim << "\n";
    os << "attn = " << (cfg.model.pro_attention ? "pro" : "full") << "\n";
    os << "attn_c = " << cfg.model.attn_c << "\n";
    os << "drop_sub = " << cfg.model.drop_prob_sub << "\n";
    os << "drop_super = " << cfg.model.drop_prob_super << "\n";
    os << "super_embedding = " << (cfg.model.super_embedding ? "true" : "false") << "\n";
    os << "init_seed = " << cfg.model.init_seed << "\n";
    os << "\n[schedule]\n";
    os << "t = " << cfg.schedule_t << "\n";
    os << "beta_start = " << cfg.beta_start << "\n";
    os << "beta_end = " << cfg.beta_end << "\n";
    os << "\n[guidance]\n";
    os << "gamma = " << cfg.guidance.gamma << "\n";
    os << "t_split = " << cfg.guidance.t_split << "\n";
    os << "w_sub = " << cfg.guidance.w_sub << "\n";
    os << "w_super = " << cfg.guidance.w_super << "\n";
    os << "d0 = " << cfg.guidance.d0 << "\n";
    os << "steps = " << cfg.guidance.steps << "\n";
    os << "\n[loss]\n";
    os << "lambda1 = " << cfg.loss.lambda1 << "\n";
    os << "lambda2 = " << cfg.loss.lambda2 << "\n";
    os << "kl_temperature = " << cfg.loss.kl_temperature << "\n";
    os << "aux_all_steps = " << (cfg.loss.aux_all_steps ? "true" : "false") << "\n";
    os << "\n[data]\n";
    os << "n_super = " << cfg.data.n_super << "\n";
    os << "subs_per_super = " << cfg.data.subs_per_super << "\n";
    os << "samples_per_sub = " << cfg.data.samples_per_sub << "\n";
    os << "height = " << cfg.data.height << "\n";
    os << "width = " << cfg.data.width << "\n";
    os << "channels = " << cfg.data.channels << "\n";
    os << "seed = " << cfg.data.seed << "\n";
    os << "\n[train]\n";
    os << "steps = " << cfg.train.steps << "\n";
    os << "batch = " << cfg.train.batch << "\n";
    os << "lr = " << cfg.train.lr << "\n";
    os << "optimizer = " << (cfg.train.optimizer == TrainSettings::Opt::adam ? "adam" : "sgd")
       << "\n";
    os << "momentum = " << cfg.train.momentum << "\n";
    os << "adam_beta1 = " << cfg.train.adam_beta1 << "\n";
    os << "adam_beta2 = " << cfg.train.adam_beta2 << "\n";
    os << "adam_eps = " << cfg.train.adam_eps << "\n";
    os << "seed = " << cfg.train.seed << "\n";
    os << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    os << "grad_clip = " << cfg.train.grad_clip << "\n";
    return os.str();
}

}  // namespace efdit
