#include "bdlm/runconfig.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace bdlm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t idx = 0;
        int64_t out = std::stoll(v, &idx);
        if (idx != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    const int64_t x = parse_i64(key, v);
    if (x < 0) throw std::invalid_argument("config: key '" + key + "' expects a non-negative integer");
    return uint64_t(x);
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t idx = 0;
        double out = std::stod(v, &idx);
        if (idx != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt_f64(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct KeyDef {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

const std::map<std::string, KeyDef>& key_table() {
    static const std::map<std::string, KeyDef> table = [] {
        std::map<std::string, KeyDef> t;
        auto i64 = [&t](const std::string& key, std::function<int64_t&(RunConfig&)> ref) {
            t[key] = {[ref](const RunConfig& c) {
                          return std::to_string(ref(const_cast<RunConfig&>(c)));
                      },
                      [ref](RunConfig& c, const std::string& k, const std::string& v) {
                          ref(c) = parse_i64(k, v);
                      }};
        };
        auto f64 = [&t](const std::string& key, std::function<double&(RunConfig&)> ref) {
            t[key] = {[ref](const RunConfig& c) { return fmt_f64(ref(const_cast<RunConfig&>(c))); },
                      [ref](RunConfig& c, const std::string& k, const std::string& v) {
                          ref(c) = parse_f64(k, v);
                      }};
        };
        auto boolean = [&t](const std::string& key, std::function<bool&(RunConfig&)> ref) {
            t[key] = {[ref](const RunConfig& c) {
                          return ref(const_cast<RunConfig&>(c)) ? std::string("true")
                                                                : std::string("false");
                      },
                      [ref](RunConfig& c, const std::string& k, const std::string& v) {
                          ref(c) = parse_bool(k, v);
                      }};
        };

        t["seed"] = {[](const RunConfig& c) { return std::to_string(c.train.seed); },
                     [](RunConfig& c, const std::string& k, const std::string& v) {
                         c.train.seed = parse_u64(k, v);
                     }};
        t["precision"] = {[](const RunConfig& c) {
                              return c.train.precision == Precision::single_prec
                                         ? std::string("single")
                                         : std::string("double");
                          },
                          [](RunConfig& c, const std::string& k, const std::string& v) {
                              if (v == "single") c.train.precision = Precision::single_prec;
                              else if (v == "double") c.train.precision = Precision::double_prec;
                              else
                                  throw std::invalid_argument(
                                      "config: key '" + k + "' expects single|double, got '" + v +
                                      "'");
                          }};
        i64("batch_size", [](RunConfig& c) -> int64_t& { return c.train.batch_size; });
        i64("seq_len", [](RunConfig& c) -> int64_t& { return c.train.seq_len; });
        f64("learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; });
        i64("lr_warmup_steps", [](RunConfig& c) -> int64_t& { return c.train.lr_warmup_steps; });
        t["lr_decay"] = {[](const RunConfig& c) { return c.train.lr_decay; },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                             if (v != "cosine" && v != "constant")
                                 throw std::invalid_argument(
                                     "config: key '" + k + "' expects cosine|constant, got '" + v +
                                     "'");
                             c.train.lr_decay = v;
                         }};
        f64("lr_final_fraction", [](RunConfig& c) -> double& { return c.train.lr_final_fraction; });
        f64("adam_beta1", [](RunConfig& c) -> double& { return c.train.adam_beta1; });
        f64("adam_beta2", [](RunConfig& c) -> double& { return c.train.adam_beta2; });
        f64("adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; });
        f64("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        f64("grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });

        i64("d_model", [](RunConfig& c) -> int64_t& { return c.train.model.d_model; });
        i64("n_layers", [](RunConfig& c) -> int64_t& { return c.train.model.n_layers; });
        i64("n_heads", [](RunConfig& c) -> int64_t& { return c.train.model.n_heads; });
        i64("d_ff", [](RunConfig& c) -> int64_t& { return c.train.model.d_ff; });
        i64("max_len", [](RunConfig& c) -> int64_t& { return c.train.model.max_len; });
        f64("rope_base", [](RunConfig& c) -> double& { return c.train.model.rope_base; });

        f64("t_min", [](RunConfig& c) -> double& { return c.train.noise.t_min; });
        f64("t_max", [](RunConfig& c) -> double& { return c.train.noise.t_max; });
        boolean("bandwidth_enabled",
                [](RunConfig& c) -> bool& { return c.train.noise.has_bandwidth; });
        f64("band_min", [](RunConfig& c) -> double& { return c.train.noise.band_min; });
        f64("band_max", [](RunConfig& c) -> double& { return c.train.noise.band_max; });

        f64("stabilizer_sigma", [](RunConfig& c) -> double& { return c.train.stabilizer.sigma; });
        i64("stabilizer_steps",
            [](RunConfig& c) -> int64_t& { return c.train.stabilizer.active_steps; });
        f64("cap_lambda", [](RunConfig& c) -> double& { return c.train.cap.lambda; });
        f64("dpo_beta", [](RunConfig& c) -> double& { return c.train.dpo.beta; });
        i64("dpo_mc_samples", [](RunConfig& c) -> int64_t& { return c.train.dpo.mc_samples; });
        boolean("dpo_shared_noise",
                [](RunConfig& c) -> bool& { return c.train.dpo.shared_noise; });

        i64("final_block_size", [](RunConfig& c) -> int64_t& { return c.train.final_block_size; });
        i64("pretrain_tokens", [](RunConfig& c) -> int64_t& { return c.train.pretrain_tokens; });
        i64("convert_tokens", [](RunConfig& c) -> int64_t& { return c.train.convert_tokens; });
        i64("sft_steps", [](RunConfig& c) -> int64_t& { return c.train.sft_steps; });
        i64("dpo_steps", [](RunConfig& c) -> int64_t& { return c.train.dpo_steps; });
        i64("save_every", [](RunConfig& c) -> int64_t& { return c.train.save_every; });
        i64("merge_top_k", [](RunConfig& c) -> int64_t& { return c.train.merge_top_k; });
        i64("eval_samples", [](RunConfig& c) -> int64_t& { return c.train.eval_samples; });
        f64("eval_fraction", [](RunConfig& c) -> double& { return c.train.eval_fraction; });
        boolean("timing_in_metrics",
                [](RunConfig& c) -> bool& { return c.train.timing_in_metrics; });

        i64("block_size", [](RunConfig& c) -> int64_t& { return c.decode.block_size; });
        f64("threshold", [](RunConfig& c) -> double& { return c.decode.threshold; });
        i64("fallback_count", [](RunConfig& c) -> int64_t& { return c.decode.fallback_count; });
        f64("temperature", [](RunConfig& c) -> double& { return c.decode.temperature; });
        i64("max_new_tokens", [](RunConfig& c) -> int64_t& { return c.decode.max_new_tokens; });
        t["decode_seed"] = {[](const RunConfig& c) { return std::to_string(c.decode.seed); },
                            [](RunConfig& c, const std::string& k, const std::string& v) {
                                c.decode.seed = parse_u64(k, v);
                            }};
        boolean("use_kv_cache", [](RunConfig& c) -> bool& { return c.decode.use_cache; });
        return t;
    }();
    return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& table = key_table();
    auto it = table.find(key);
    if (it == table.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    it->second.set(*this, key, value);
    validate();
}

RunConfig RunConfig::parse_text(const std::string& text, const std::string& origin) {
    RunConfig cfg = defaults();
    const auto& table = key_table();
    std::istringstream in(text);
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: " + origin + " line " + std::to_string(line_no) +
                                        ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = table.find(key);
        if (it == table.end())
            throw std::invalid_argument("config: unknown key '" + key + "' (" + origin + " line " +
                                        std::to_string(line_no) + ")");
        try {
            it->second.set(cfg, key, value);
        } catch (const std::exception& e) {
            throw std::invalid_argument(std::string(e.what()) + " (" + origin + " line " +
                                        std::to_string(line_no) + ")");
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str(), path);
}

std::string RunConfig::serialize() const {
    std::string out;
    for (const auto& [key, def] : key_table()) {
        out += key;
        out += " = ";
        out += def.get(*this);
        out += "\n";
    }
    return out;
}

void RunConfig::validate() const {
    train.validate();
    decode.validate();
    if (train.eval_fraction < 0.0 || train.eval_fraction >= 1.0)
        throw std::invalid_argument("config: eval_fraction must lie in [0,1)");
    if (train.dpo.mc_samples < 1)
        throw std::invalid_argument("config: dpo_mc_samples must be >= 1");
    if (!(train.dpo.beta > 0.0)) throw std::invalid_argument("config: dpo_beta must be > 0");
    if (train.cap.lambda < 0.0) throw std::invalid_argument("config: cap_lambda must be >= 0");
    if (train.stabilizer.sigma < 0.0)
        throw std::invalid_argument("config: stabilizer_sigma must be >= 0");
    if (train.seq_len % train.final_block_size != 0)
        throw std::invalid_argument("config: final_block_size must divide seq_len");
}

}  // namespace bdlm
