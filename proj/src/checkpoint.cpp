#include "cxr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "cxr/sha256.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float32");

namespace cxr {

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kBlobName = "weights.bin";
constexpr const char* kFormat = "cxr-checkpoint-v1";

nlohmann::ordered_json config_to_json(const Model& model) {
    const ModelConfig& c = model.config();
    nlohmann::ordered_json j;
    j["kind"] = to_string(model.kind());
    j["depth"] = c.depth;
    j["input_channels"] = c.input_channels;
    j["input_size"] = c.input_size;
    j["extra_pool_after_conv2"] = c.extra_pool_after_conv2;
    j["use_meta"] = c.use_meta;
    j["num_labels"] = c.num_labels;
    j["freeze"] = to_string(c.freeze);
    j["width_div"] = c.width_div;
    if (model.kind() == ModelKind::kProbe) j["probe_target"] = to_string(model.probe_target());
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.depth = j.at("depth").get<int>();
    c.input_channels = j.at("input_channels").get<int>();
    c.input_size = j.at("input_size").get<int>();
    c.extra_pool_after_conv2 = j.at("extra_pool_after_conv2").get<bool>();
    c.use_meta = j.at("use_meta").get<bool>();
    c.num_labels = j.at("num_labels").get<int>();
    c.freeze = freeze_from_string(j.at("freeze").get<std::string>());
    c.width_div = j.at("width_div").get<int>();
    return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct LoadedCheckpoint {
    nlohmann::json manifest;
    std::vector<std::uint8_t> blob;

    struct Entry {
        std::vector<int> shape;
        std::size_t offset; // bytes into the blob
    };
    std::map<std::string, Entry> entries;
};

LoadedCheckpoint open_checkpoint(const std::filesystem::path& dir) {
    LoadedCheckpoint ck;
    {
        std::ifstream in(dir / kManifestName);
        if (!in) throw IoError("cannot open checkpoint manifest '" + (dir / kManifestName).string() + "'");
        try {
            in >> ck.manifest;
        } catch (const nlohmann::json::exception& e) {
            throw ValueError("malformed checkpoint manifest: " + std::string(e.what()));
        }
    }
    if (ck.manifest.value("format", "") != kFormat)
        throw ValueError("unsupported checkpoint format '" + ck.manifest.value("format", "") + "'");
    ck.blob = read_file(dir / ck.manifest.at("blob").get<std::string>());
    const std::string expected = ck.manifest.at("blob_sha256").get<std::string>();
    const std::string actual = Sha256::of(ck.blob.data(), ck.blob.size());
    if (actual != expected)
        throw IntegrityError("checkpoint blob hash mismatch: manifest " + expected + ", blob " + actual);
    for (const auto& t : ck.manifest.at("tensors")) {
        LoadedCheckpoint::Entry e;
        e.shape = t.at("shape").get<std::vector<int>>();
        e.offset = t.at("offset").get<std::size_t>();
        const std::size_t bytes = static_cast<std::size_t>(shape_numel(e.shape)) * sizeof(float);
        if (e.offset + bytes > ck.blob.size())
            throw IntegrityError("checkpoint tensor '" + t.at("name").get<std::string>() +
                                 "' extends past end of blob");
        ck.entries[t.at("name").get<std::string>()] = std::move(e);
    }
    return ck;
}

} // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    std::vector<std::uint8_t> blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    model.visit_state([&](const StateEntry& e) {
        nlohmann::ordered_json t;
        t["name"] = e.name;
        t["shape"] = e.shape;
        t["offset"] = blob.size();
        tensors.push_back(std::move(t));
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(e.data);
        blob.insert(blob.end(), bytes, bytes + e.size * sizeof(float));
    });

    nlohmann::ordered_json manifest;
    manifest["format"] = kFormat;
    manifest["config"] = config_to_json(model);
    manifest["blob"] = kBlobName;
    manifest["blob_sha256"] = Sha256::of(blob.data(), blob.size());
    nlohmann::ordered_json bn_batches;
    model.for_each_bn([&](const std::string& name, const BatchNormState& bn) {
        bn_batches[name] = bn.batches_seen;
    });
    manifest["bn_batches"] = std::move(bn_batches);
    manifest["tensors"] = std::move(tensors);

    {
        std::ofstream out(dir / kBlobName, std::ios::binary);
        if (!out) throw IoError("cannot write checkpoint blob in '" + dir.string() + "'");
        out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    }
    std::ofstream out(dir / kManifestName);
    if (!out) throw IoError("cannot write checkpoint manifest in '" + dir.string() + "'");
    out << manifest.dump(2) << "\n";
}

Model load_checkpoint(const std::filesystem::path& dir) {
    LoadedCheckpoint ck = open_checkpoint(dir);
    const auto& cfg_json = ck.manifest.at("config");
    const std::string kind = cfg_json.at("kind").get<std::string>();

    Model model;
    if (kind == "meta_mlp") {
        model = build_meta_mlp(0);
    } else if (kind == "resnet") {
        model = build_model(config_from_json(cfg_json), 0);
    } else if (kind == "probe") {
        Model base = build_model(config_from_json(cfg_json), 0);
        model = build_probe(base, probe_target_from_string(cfg_json.at("probe_target").get<std::string>()), 0);
    } else {
        throw ValueError("unknown model kind '" + kind + "' in checkpoint");
    }

    model.visit_state([&](const StateEntry& e) {
        const auto it = ck.entries.find(e.name);
        if (it == ck.entries.end())
            throw ValueError("checkpoint missing tensor '" + e.name + "'");
        if (it->second.shape != e.shape)
            throw ShapeError("checkpoint tensor '" + e.name + "' has shape " +
                             shape_str(it->second.shape) + ", model expects " + shape_str(e.shape));
        std::memcpy(e.data, ck.blob.data() + it->second.offset, e.size * sizeof(float));
    });
    const auto& bn_batches = ck.manifest.at("bn_batches");
    model.for_each_bn([&](const std::string& name, BatchNormState& bn) {
        bn.batches_seen = bn_batches.at(name).get<std::int64_t>();
    });
    return model;
}

void import_pretrained(Model& model, const std::filesystem::path& dir) {
    LoadedCheckpoint ck = open_checkpoint(dir);
    // Everything except the classifier head must match by name and shape.
    model.visit_state([&](const StateEntry& e) {
        if (e.name.starts_with("head.") || e.name.starts_with("probe.")) return;
        const auto it = ck.entries.find(e.name);
        if (it == ck.entries.end())
            throw ValueError("pretrained checkpoint missing tensor '" + e.name + "'");
        if (it->second.shape != e.shape)
            throw ShapeError("pretrained tensor '" + e.name + "' has shape " +
                             shape_str(it->second.shape) + ", model expects " + shape_str(e.shape) +
                             " (cross-channel transfer is unsupported)");
    });
    model.visit_state([&](const StateEntry& e) {
        if (e.name.starts_with("head.") || e.name.starts_with("probe.")) return;
        const auto& entry = ck.entries.at(e.name);
        std::memcpy(e.data, ck.blob.data() + entry.offset, e.size * sizeof(float));
    });
    const auto& bn_batches = ck.manifest.at("bn_batches");
    model.for_each_bn([&](const std::string& name, BatchNormState& bn) {
        if (bn_batches.contains(name)) bn.batches_seen = bn_batches.at(name).get<std::int64_t>();
    });
}

} // namespace cxr
