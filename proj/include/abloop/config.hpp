#pragma once
// Run configuration: one JSON document with a schema version. Unknown keys
// are errors; messages carry the key path and its line in the source text.

#include "abloop/campaign.hpp"
#include "abloop/core.hpp"
#include "abloop/denoiser.hpp"
#include "abloop/diffusion.hpp"
#include "abloop/oracles.hpp"
#include "abloop/sampler.hpp"

#include "json.hpp"

#include <set>
#include <string>
#include <vector>

namespace abloop {

inline constexpr int kConfigSchemaVersion = 1;

namespace detail {

class ConfigReader {
public:
    ConfigReader(const nlohmann::json& node, std::string path, const std::string* text)
        : node_(node), path_(std::move(path)), text_(text) {
        if (!node_.is_object()) fail(path_.empty() ? "config" : path_, "must be an object");
    }

    template <typename T>
    T get(const std::string& key, T fallback) {
        seen_.insert(key);
        if (!node_.contains(key)) return fallback;
        return convert<T>(key);
    }

    template <typename T>
    T require(const std::string& key) {
        seen_.insert(key);
        if (!node_.contains(key)) fail(full(key), "missing required field '" + full(key) + "'");
        return convert<T>(key);
    }

    bool has(const std::string& key) const { return node_.contains(key); }

    ConfigReader section(const std::string& key) {
        seen_.insert(key);
        static const nlohmann::json empty = nlohmann::json::object();
        return ConfigReader(node_.contains(key) ? node_.at(key) : empty, full(key), text_);
    }

    void finish() const {
        for (const auto& [key, value] : node_.items())
            if (!seen_.count(key)) fail(full(key), "unknown key '" + full(key) + "'");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        throw Error(ErrorKind::ConfigError, msg + line_suffix(key));
    }

private:
    std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    // Best effort: line of the first occurrence of the last path component.
    std::string line_suffix(const std::string& dotted) const {
        if (!text_) return "";
        auto leaf = dotted.substr(dotted.rfind('.') == std::string::npos ? 0 : dotted.rfind('.') + 1);
        auto at = text_->find("\"" + leaf + "\"");
        if (at == std::string::npos) return "";
        return " (line " + std::to_string(1 + std::count(text_->begin(), text_->begin() + static_cast<long>(at), '\n')) + ")";
    }

    template <typename T>
    T convert(const std::string& key) const {
        const auto& v = node_.at(key);
        try {
            if constexpr (std::is_same_v<T, std::uint64_t>) {
                if (!v.is_number_unsigned()) throw std::invalid_argument("not an unsigned integer");
            } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
                if (!v.is_number_integer()) throw std::invalid_argument("not an integer");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw std::invalid_argument("not a number");
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw std::invalid_argument("not a boolean");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw std::invalid_argument("not a string");
            }
            return v.get<T>();
        } catch (const std::exception& e) {
            fail(full(key), "field '" + full(key) + "': " + e.what());
        }
    }

    const nlohmann::json& node_;
    std::string path_;
    const std::string* text_;
    std::set<std::string> seen_;
};

}  // namespace detail

struct DataSection {
    int num_complexes = 200;
    std::uint64_t seed = 0;  // defaults to the run seed
    std::string dir;  // directory of complex files; empty means synthetic
};

struct AblationSection {
    std::vector<std::string> modes{"ground_truth", "noisy_predicted:0.5", "rotated_pose:25"};
    int num_samples = 500;
    int top_k = 500;
    int library_size = 300;  // assayed random mutants used to fit the ranking oracle
};

struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 0;  // 0: all available cores
    DataSection data;
    NoiseSchedule schedule = default_schedule();
    std::string schedule_kind = "cosine";
    ModelConfig model;
    TrainConfig train;
    SampleConfig sample;
    std::string guidance = "ridge";  // oracle used when sample.gamma != 0
    LandscapeConfig landscape;
    CampaignConfig campaign;
    std::uint64_t start_complex_seed = 0;  // synthetic starting complex when none is given
    AblationSection ablation;
    nlohmann::ordered_json canonical;  // normalized echo of every setting

    int effective_threads() const { return threads > 0 ? threads : default_threads(); }
    std::uint64_t hash() const { return Hasher().str(canonical.dump()).value(); }
};

inline std::vector<Region> parse_regions(const std::vector<std::string>& names) {
    std::vector<Region> out;
    for (const auto& n : names) {
        Region r = Region::Framework;
        try {
            r = region_from_tag(n);
        } catch (const Error&) {
            throw Error(ErrorKind::ConfigError, "unknown region '" + n + "'");
        }
        if (!is_cdr(r)) throw Error(ErrorKind::ConfigError, "region '" + n + "' is not a CDR");
        out.push_back(r);
    }
    return out;
}

inline RunConfig parse_config(const std::string& text, std::optional<std::uint64_t> seed_override = std::nullopt) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::ConfigError, std::string("config is not valid JSON: ") + e.what());
    }
    detail::ConfigReader top(doc, "", &text);
    RunConfig c;
    int version = top.require<int>("schema_version");
    if (version != kConfigSchemaVersion)
        top.fail("schema_version", "unsupported schema_version " + std::to_string(version));
    c.seed = top.require<std::uint64_t>("seed");
    if (seed_override) c.seed = *seed_override;
    c.threads = top.get<int>("threads", 0);
    if (c.threads < 0) top.fail("threads", "threads must be >= 0");

    auto data = top.section("data");
    c.data.num_complexes = data.get<int>("num_complexes", c.data.num_complexes);
    c.data.seed = data.get<std::uint64_t>("seed", c.seed);
    c.data.dir = data.get<std::string>("dir", "");
    data.finish();

    auto sched = top.section("schedule");
    int steps = sched.get<int>("steps", 100);
    c.schedule_kind = sched.get<std::string>("kind", "cosine");
    if (c.schedule_kind != "cosine" && c.schedule_kind != "linear") sched.fail("kind", "schedule.kind must be cosine or linear");
    c.schedule = make_schedule(steps, c.schedule_kind == "cosine" ? ScheduleKind::Cosine : ScheduleKind::Linear);
    sched.finish();

    auto model = top.section("model");
    c.model.hidden = model.get<int>("hidden", c.model.hidden);
    c.model.layers = model.get<int>("layers", c.model.layers);
    c.model.neighbors = model.get<int>("neighbors", c.model.neighbors);
    c.model.steps = steps;
    model.finish();

    auto train = top.section("train");
    c.train.steps = train.get<int>("steps", c.train.steps);
    c.train.learning_rate = train.get<double>("learning_rate", c.train.learning_rate);
    c.train.batch_size = train.get<int>("batch_size", c.train.batch_size);
    c.train.patch_size = train.get<int>("patch_size", c.train.patch_size);
    c.train.checkpoint_interval = train.get<int>("checkpoint_interval", c.train.checkpoint_interval);
    c.train.weights.type = train.get<double>("lambda_type", c.train.weights.type);
    c.train.weights.pos = train.get<double>("lambda_pos", c.train.weights.pos);
    c.train.weights.orient = train.get<double>("lambda_orient", c.train.weights.orient);
    c.train.seed = derive_seed(c.seed, 1);
    train.finish();

    auto sample = top.section("sample");
    c.sample.t_noise = sample.get<int>("t_noise", c.sample.t_noise);
    c.sample.num_samples = sample.get<int>("num_samples", c.sample.num_samples);
    c.sample.max_cdr_edits = sample.get<int>("max_cdr_edits", c.sample.max_cdr_edits);
    c.sample.gamma = sample.get<double>("gamma", 0.0);
    c.guidance = sample.get<std::string>("guidance", c.guidance);
    if (c.guidance != "ridge" && c.guidance != "liability") sample.fail("guidance", "sample.guidance must be ridge or liability");
    if (sample.has("regions"))
        c.sample.mask_selector = parse_regions(sample.get<std::vector<std::string>>("regions", {}));
    c.sample.seed = c.seed;
    sample.finish();

    auto land = top.section("landscape");
    auto& l = c.landscape;
    l.rule_weight = land.get<double>("rule_weight", l.rule_weight);
    l.noise_weight = land.get<double>("noise_weight", l.noise_weight);
    l.epistatic_pairs = land.get<int>("epistatic_pairs", l.epistatic_pairs);
    l.epistasis_scale = land.get<double>("epistasis_scale", l.epistasis_scale);
    l.sigma_meas = land.get<double>("sigma_meas", l.sigma_meas);
    l.fail_base = land.get<double>("fail_base", l.fail_base);
    l.fail_per_edit = land.get<double>("fail_per_edit", l.fail_per_edit);
    l.fail_cap = land.get<double>("fail_cap", l.fail_cap);
    l.seed = land.get<std::uint64_t>("seed", c.seed);
    land.finish();

    auto camp = top.section("campaign");
    auto& cc = c.campaign;
    cc.num_rounds = camp.get<int>("num_rounds", cc.num_rounds);
    cc.designs_per_round = camp.get<int>("designs_per_round", cc.designs_per_round);
    cc.seeds_per_round = camp.get<int>("seeds_per_round", cc.seeds_per_round);
    cc.initial_library = camp.get<int>("initial_library", cc.initial_library);
    cc.predictor = PredictorMode::parse(camp.get<std::string>("predictor", "ground_truth"));
    auto gen = camp.get<std::string>("generator", "diffusion");
    if (gen == "diffusion") cc.generator = Generator::Diffusion;
    else if (gen == "random_mutation") cc.generator = Generator::RandomMutation;
    else camp.fail("generator", "campaign.generator must be diffusion or random_mutation");
    c.start_complex_seed = camp.get<std::uint64_t>("start_complex_seed", 0);
    auto filt = camp.section("filter");
    if (filt.has("min_charge")) cc.filter.min_charge = filt.get<double>("min_charge", 0.0);
    if (filt.has("max_charge")) cc.filter.max_charge = filt.get<double>("max_charge", 0.0);
    cc.filter.motifs = filt.get<std::vector<std::string>>("motifs", cc.filter.motifs);
    cc.filter.exclude_unpaired_cys = filt.get<bool>("exclude_unpaired_cys", cc.filter.exclude_unpaired_cys);
    filt.finish();
    auto ens = camp.section("ensemble");
    cc.ensemble.members = ens.get<int>("members", cc.ensemble.members);
    cc.ensemble.hidden = ens.get<int>("hidden", cc.ensemble.hidden);
    cc.ensemble.epochs = ens.get<int>("epochs", cc.ensemble.epochs);
    cc.ensemble.learning_rate = ens.get<double>("learning_rate", cc.ensemble.learning_rate);
    cc.ensemble.weight_decay = ens.get<double>("weight_decay", cc.ensemble.weight_decay);
    ens.finish();
    camp.finish();
    cc.sample = c.sample;
    cc.landscape = c.landscape;
    cc.seed = c.seed;
    cc.validate();

    auto abl = top.section("ablation");
    c.ablation.modes = abl.get<std::vector<std::string>>("modes", c.ablation.modes);
    for (const auto& m : c.ablation.modes) PredictorMode::parse(m);
    c.ablation.num_samples = abl.get<int>("num_samples", c.ablation.num_samples);
    c.ablation.top_k = abl.get<int>("top_k", c.ablation.top_k);
    c.ablation.library_size = abl.get<int>("library_size", c.ablation.library_size);
    abl.finish();
    top.finish();

    // Canonical echo: every effective setting, in a fixed order.
    auto& j = c.canonical;
    j["schema_version"] = kConfigSchemaVersion;
    j["seed"] = c.seed;
    j["data"] = {{"num_complexes", c.data.num_complexes}, {"seed", c.data.seed}, {"dir", c.data.dir}};
    j["schedule"] = {{"steps", steps}, {"kind", c.schedule_kind}};
    j["model"] = {{"hidden", c.model.hidden}, {"layers", c.model.layers}, {"neighbors", c.model.neighbors}};
    j["train"] = {{"steps", c.train.steps},
                  {"learning_rate", c.train.learning_rate},
                  {"batch_size", c.train.batch_size},
                  {"patch_size", c.train.patch_size},
                  {"checkpoint_interval", c.train.checkpoint_interval},
                  {"lambda_type", c.train.weights.type},
                  {"lambda_pos", c.train.weights.pos},
                  {"lambda_orient", c.train.weights.orient}};
    std::vector<std::string> regions;
    for (Region r : c.sample.mask_selector) regions.push_back(region_tag(r));
    j["sample"] = {{"t_noise", c.sample.t_noise},       {"num_samples", c.sample.num_samples},
                   {"max_cdr_edits", c.sample.max_cdr_edits}, {"gamma", c.sample.gamma},
                   {"guidance", c.guidance},             {"regions", regions}};
    j["landscape"] = {{"rule_weight", l.rule_weight},         {"noise_weight", l.noise_weight},
                      {"epistatic_pairs", l.epistatic_pairs}, {"epistasis_scale", l.epistasis_scale},
                      {"sigma_meas", l.sigma_meas},           {"fail_base", l.fail_base},
                      {"fail_per_edit", l.fail_per_edit},     {"fail_cap", l.fail_cap},
                      {"seed", l.seed}};
    nlohmann::ordered_json filter;
    filter["min_charge"] = cc.filter.min_charge ? nlohmann::ordered_json(*cc.filter.min_charge) : nlohmann::ordered_json(nullptr);
    filter["max_charge"] = cc.filter.max_charge ? nlohmann::ordered_json(*cc.filter.max_charge) : nlohmann::ordered_json(nullptr);
    filter["motifs"] = cc.filter.motifs;
    filter["exclude_unpaired_cys"] = cc.filter.exclude_unpaired_cys;
    j["campaign"] = {{"num_rounds", cc.num_rounds},
                     {"designs_per_round", cc.designs_per_round},
                     {"seeds_per_round", cc.seeds_per_round},
                     {"initial_library", cc.initial_library},
                     {"predictor", cc.predictor.label()},
                     {"generator", gen},
                     {"start_complex_seed", c.start_complex_seed},
                     {"filter", filter},
                     {"ensemble",
                      {{"members", cc.ensemble.members},
                       {"hidden", cc.ensemble.hidden},
                       {"epochs", cc.ensemble.epochs},
                       {"learning_rate", cc.ensemble.learning_rate},
                       {"weight_decay", cc.ensemble.weight_decay}}}};
    j["ablation"] = {{"modes", c.ablation.modes},
                     {"num_samples", c.ablation.num_samples},
                     {"top_k", c.ablation.top_k},
                     {"library_size", c.ablation.library_size}};
    return c;
}

inline RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const Error& e) {
        throw Error(ErrorKind::ConfigError, e.message());
    }
    try {
        return parse_config(text, seed_override);
    } catch (const Error& e) {
        throw Error(ErrorKind::ConfigError, path + ": " + e.message());
    }
}

}  // namespace abloop
