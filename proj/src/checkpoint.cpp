#include "mutualctr/checkpoint.hpp"

#include "mutualctr/tensor.hpp"
#include "vendor_json.hpp"

#include <cstring>
#include <fstream>

namespace mutualctr::models {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& cfg) {
    json j;
    j["embedding_dim"] = cfg.embedding_dim;
    j["tower"] = cfg.tower;
    j["cross_depth"] = cfg.cross_depth;
    j["senet_ratio"] = cfg.senet_ratio;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    cfg.tower = j.at("tower").get<std::vector<std::size_t>>();
    cfg.cross_depth = j.at("cross_depth").get<std::size_t>();
    cfg.senet_ratio = j.at("senet_ratio").get<std::size_t>();
    return cfg;
}

} // namespace

void save_checkpoint(const ModelInstance& model, const std::string& path) {
    json header;
    header["format_version"] = 1;
    header["architecture"] = architecture_name(model.architecture());
    header["config"] = config_to_json(model.config());
    header["fields"]["cat_vocab_sizes"] = model.fields().cat_vocab_sizes;
    header["fields"]["num_fields"] = model.fields().num_fields;
    header["schema_hash"] = model.schema_hash();

    json manifest = json::object();
    std::uint64_t offset = 0;
    for (const ad::Parameter& p : model.params()) {
        json entry;
        entry["shape"] = p.value.shape();
        entry["offset"] = offset;
        manifest[p.id] = std::move(entry);
        offset += p.value.numel() * sizeof(double);
    }
    header["manifest"] = std::move(manifest);

    std::string header_text = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    os.write("MCKP", 4);
    std::uint64_t len = header_text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const ad::Parameter& p : model.params()) {
        os.write(reinterpret_cast<const char*>(p.value.data()),
                 static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed for checkpoint " + path);
}

ModelInstance load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MCKP", 4) != 0) {
        throw std::runtime_error(path + ": not a checkpoint file (bad magic)");
    }
    std::uint64_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), sizeof(len))) {
        throw std::runtime_error(path + ": truncated checkpoint header length");
    }
    std::string header_text(len, '\0');
    if (!is.read(header_text.data(), static_cast<std::streamsize>(len))) {
        throw std::runtime_error(path + ": truncated checkpoint header");
    }

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": corrupt checkpoint header: " + e.what());
    }
    if (header.at("format_version").get<int>() != 1) {
        throw std::runtime_error(path + ": unsupported checkpoint format version");
    }

    Architecture arch = architecture_from_string(header.at("architecture").get<std::string>());
    ModelConfig cfg = config_from_json(header.at("config"));
    FieldInfo fields;
    fields.cat_vocab_sizes = header.at("fields").at("cat_vocab_sizes").get<std::vector<std::uint32_t>>();
    fields.num_fields = header.at("fields").at("num_fields").get<std::size_t>();
    std::string schema_hash = header.at("schema_hash").get<std::string>();

    ModelInstance model(arch, cfg, fields, schema_hash);

    const json& manifest = header.at("manifest");
    if (manifest.size() != model.params().size()) {
        throw std::runtime_error(path + ": manifest has " + std::to_string(manifest.size()) +
                                 " entries, model has " + std::to_string(model.params().size()) + " parameters");
    }
    // data section starts right after the header
    std::streampos data_start = is.tellg();
    for (ad::Parameter& p : model.params()) {
        if (!manifest.contains(p.id)) {
            throw std::runtime_error(path + ": manifest is missing parameter '" + p.id + "'");
        }
        const json& entry = manifest.at(p.id);
        auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != p.value.shape()) {
            throw std::runtime_error(path + ": parameter '" + p.id + "' has shape " + ad::shape_str(shape) +
                                     " in the manifest, expected " + ad::shape_str(p.value.shape()));
        }
        std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        is.seekg(data_start + static_cast<std::streamoff>(offset));
        if (!is.read(reinterpret_cast<char*>(p.value.data()),
                     static_cast<std::streamsize>(p.value.numel() * sizeof(double)))) {
            throw std::runtime_error(path + ": truncated data for parameter '" + p.id + "'");
        }
        ad::check_finite(p.value, path + ": parameter '" + p.id + "'");
    }
    return model;
}

void require_schema_match(const ModelInstance& model, const std::string& schema_hash, const std::string& context) {
    if (model.schema_hash() != schema_hash) {
        throw std::runtime_error(context + ": checkpoint schema hash " + model.schema_hash() +
                                 " does not match dataset schema hash " + schema_hash);
    }
}

} // namespace mutualctr::models
