#include "rsmpod/run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rsmpod/rng.hpp"

namespace rsmpod {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json spec_json(const DatasetSpec& s) {
    ordered_json cats = ordered_json::array();
    for (const auto& c : s.categories)
        cats.push_back({{"name", c.name},
                        {"shape", c.shape},
                        {"color", c.color},
                        {"color_jitter", c.color_jitter}});
    return {{"categories", std::move(cats)}, {"scenes", s.scenes},
            {"objects_min", s.objects_min},  {"objects_max", s.objects_max},
            {"noise_amplitude", s.noise_amplitude}, {"master_seed", s.master_seed}};
}

DatasetSpec spec_parse(const json& j, const std::string& where) {
    DatasetSpec s;
    try {
        for (const auto& c : j.at("categories")) {
            CategorySpec cs;
            cs.name = c.at("name").get<std::string>();
            cs.shape = c.at("shape").get<std::string>();
            auto col = c.at("color").get<std::vector<double>>();
            if (col.size() != 3) throw ConfigError(where + ".categories: color needs 3 channels");
            std::copy(col.begin(), col.end(), cs.color.begin());
            cs.color_jitter = c.value("color_jitter", 0.08);
            s.categories.push_back(std::move(cs));
        }
        s.scenes = j.at("scenes").get<int>();
        s.objects_min = j.at("objects_min").get<int>();
        s.objects_max = j.at("objects_max").get<int>();
        s.noise_amplitude = j.at("noise_amplitude").get<double>();
        s.master_seed = j.at("master_seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return s;
}

ordered_json stage_json(const StageConfig& s) {
    return {{"stage", s.stage},
            {"epochs", s.epochs},
            {"lr", s.lr},
            {"batch_size", s.batch_size},
            {"instances_per_category", s.instances_per_category},
            {"freeze_detector", s.freeze_detector},
            {"fusion_train_prompt_count", s.fusion_train_prompt_count},
            {"grad_clip", s.grad_clip}};
}

StageConfig stage_parse(const json& j, int id, const std::string& where) {
    StageConfig s;
    s.stage = id;
    try {
        s.epochs = j.at("epochs").get<int>();
        s.lr = j.at("lr").get<double>();
        s.batch_size = j.value("batch_size", 4);
        s.instances_per_category = j.value("instances_per_category", 1);
        s.freeze_detector = j.value("freeze_detector", true);
        s.fusion_train_prompt_count = j.value("fusion_train_prompt_count", std::string("32"));
        s.grad_clip = j.value("grad_clip", 1.0);
    } catch (const json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
    if (s.fusion_train_prompt_count != "random") {
        try {
            int n = std::stoi(s.fusion_train_prompt_count);
            if (n < 1) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw ConfigError(where + ".fusion_train_prompt_count: expected count or \"random\"");
        }
    }
    return s;
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig rc;
    rc.train_spec = reference_spec(500, 20260801);
    rc.test_spec = reference_spec(100, 918273645);
    rc.stage1 = StageConfig{1, 30, 1e-3, 4, 1, true, "32", 1.0};
    rc.stage2 = StageConfig{2, 10, 1e-3, 4, 1, true, "32", 1.0};
    rc.stage3 = StageConfig{3, 10, 1e-3, 4, 1, true, "32", 1.0};
    return rc;
}

std::string RunConfig::to_json_text() const {
    ordered_json j;
    j["dataset"] = {{"train", spec_json(train_spec)}, {"test", spec_json(test_spec)}};
    j["model"] = {{"d", model.d},
                  {"heads", model.heads},
                  {"enc_layers", model.enc_layers},
                  {"dec_layers", model.dec_layers},
                  {"num_queries", model.num_queries},
                  {"levels", model.levels},
                  {"ffn_mult", model.ffn_mult},
                  {"vocab_size", model.vocab_size},
                  {"deform_points", model.deform_points},
                  {"image_size", model.image_size},
                  {"tau", model.tau},
                  {"lambda_cls", model.lambda_cls},
                  {"lambda_l1", model.lambda_l1},
                  {"lambda_giou", model.lambda_giou},
                  {"background_coef", model.background_coef},
                  {"text_reduce", model.text_reduce},
                  {"ref_extents", model.ref_extents}};
    j["stages"] = {{"1", stage_json(stage1)}, {"2", stage_json(stage2)}, {"3", stage_json(stage3)}};
    j["prompt_mode"] = prompt_mode;
    j["visual_prompt_count"] = visual_prompt_count;
    j["conf_threshold"] = conf_threshold;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["train_stages"] = stages;
    return j.dump(2);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig rc = defaults();
    try {
        if (j.contains("dataset")) {
            if (j["dataset"].contains("train"))
                rc.train_spec = spec_parse(j["dataset"]["train"], "dataset.train");
            if (j["dataset"].contains("test"))
                rc.test_spec = spec_parse(j["dataset"]["test"], "dataset.test");
        }
        if (j.contains("model")) {
            const auto& m = j["model"];
            auto& mc = rc.model;
            mc.d = m.value("d", mc.d);
            mc.heads = m.value("heads", mc.heads);
            mc.enc_layers = m.value("enc_layers", mc.enc_layers);
            mc.dec_layers = m.value("dec_layers", mc.dec_layers);
            mc.num_queries = m.value("num_queries", mc.num_queries);
            mc.levels = m.value("levels", mc.levels);
            mc.ffn_mult = m.value("ffn_mult", mc.ffn_mult);
            mc.vocab_size = m.value("vocab_size", mc.vocab_size);
            mc.deform_points = m.value("deform_points", mc.deform_points);
            mc.image_size = m.value("image_size", mc.image_size);
            mc.tau = m.value("tau", mc.tau);
            mc.lambda_cls = m.value("lambda_cls", mc.lambda_cls);
            mc.lambda_l1 = m.value("lambda_l1", mc.lambda_l1);
            mc.lambda_giou = m.value("lambda_giou", mc.lambda_giou);
            mc.background_coef = m.value("background_coef", mc.background_coef);
            mc.text_reduce = m.value("text_reduce", mc.text_reduce);
            if (m.contains("ref_extents"))
                mc.ref_extents = m["ref_extents"].get<std::vector<double>>();
        }
        if (j.contains("stages")) {
            if (j["stages"].contains("1")) rc.stage1 = stage_parse(j["stages"]["1"], 1, "stages.1");
            if (j["stages"].contains("2")) rc.stage2 = stage_parse(j["stages"]["2"], 2, "stages.2");
            if (j["stages"].contains("3")) rc.stage3 = stage_parse(j["stages"]["3"], 3, "stages.3");
        }
        rc.prompt_mode = j.value("prompt_mode", rc.prompt_mode);
        rc.visual_prompt_count = j.value("visual_prompt_count", rc.visual_prompt_count);
        rc.conf_threshold = j.value("conf_threshold", rc.conf_threshold);
        rc.seed = j.value("seed", rc.seed);
        rc.out_dir = j.value("out_dir", rc.out_dir);
        if (j.contains("train_stages")) rc.stages = j["train_stages"].get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (rc.visual_prompt_count < 1) throw ConfigError("config: visual_prompt_count must be >= 1");
    if (rc.model.tau <= 0) throw ConfigError("config: model.tau must be positive");
    const std::set<std::string> modes{"text", "visual", "multimodal", "avg_baseline"};
    if (!modes.count(rc.prompt_mode))
        throw ConfigError("config: prompt_mode must be text|visual|multimodal|avg_baseline");
    return rc;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json_text(ss.str());
}

std::string RunConfig::config_hash() const {
    uint64_t h = fnv1a(to_json_text());
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void RunConfig::apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must be key=value: " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    // round-trip through JSON so every settable field shares one code path
    json j = json::parse(to_json_text());
    json* node = &j;
    std::string walked;
    size_t pos = 0;
    while (true) {
        size_t dot = path.find('.', pos);
        std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        walked += (walked.empty() ? "" : ".") + key;
        if (!node->contains(key))
            throw ConfigError("unknown config field: " + walked);
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    // preserve the existing type
    try {
        if (node->is_string())
            *node = value;
        else if (node->is_boolean())
            *node = (value == "true" || value == "1");
        else if (node->is_number_integer())
            *node = std::stoll(value);
        else if (node->is_number_unsigned())
            *node = static_cast<uint64_t>(std::stoull(value));
        else if (node->is_number_float())
            *node = std::stod(value);
        else
            *node = json::parse(value);  // arrays/objects as JSON text
    } catch (const std::exception& e) {
        throw ConfigError("bad value for " + path + ": " + e.what());
    }
    *this = from_json_text(j.dump());
}

}  // namespace rsmpod
