#include "mutualctr/models.hpp"

#include "mutualctr/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace mutualctr::models {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

Architecture architecture_from_string(const std::string& name) {
    if (name == "deepfm") return Architecture::deepfm;
    if (name == "dcn") return Architecture::dcn;
    if (name == "pnn") return Architecture::pnn;
    if (name == "fibinet") return Architecture::fibinet;
    throw std::invalid_argument("unknown architecture '" + name + "' (want deepfm|dcn|pnn|fibinet)");
}

std::string architecture_name(Architecture arch) {
    switch (arch) {
        case Architecture::deepfm: return "deepfm";
        case Architecture::dcn: return "dcn";
        case Architecture::pnn: return "pnn";
        case Architecture::fibinet: return "fibinet";
    }
    throw std::logic_error("unreachable");
}

namespace {

FieldInfo fields_from_schema(const data::FeatureSchema& schema) {
    FieldInfo info;
    info.cat_vocab_sizes = schema.cat_vocab_sizes();
    info.num_fields = schema.num_field_count();
    return info;
}

std::size_t senet_hidden(std::size_t total_fields, std::size_t ratio) {
    if (ratio == 0 || total_fields / ratio < 1) {
        throw std::invalid_argument("fibinet: senet reduction ratio " + std::to_string(ratio) +
                                    " too large for " + std::to_string(total_fields) + " fields");
    }
    return (total_fields + ratio - 1) / ratio;
}

} // namespace

ModelInstance::ModelInstance(Architecture arch, ModelConfig cfg, const data::FeatureSchema& schema,
                             std::uint64_t init_seed)
    : arch_(arch), cfg_(std::move(cfg)), fields_(fields_from_schema(schema)), schema_hash_(schema.hash()) {
    build_params(init_seed, true);
}

ModelInstance::ModelInstance(Architecture arch, ModelConfig cfg, FieldInfo fields, std::string schema_hash)
    : arch_(arch), cfg_(std::move(cfg)), fields_(std::move(fields)), schema_hash_(std::move(schema_hash)) {
    build_params(0, false);
}

void ModelInstance::build_params(std::uint64_t init_seed, bool initialize) {
    const std::size_t d = cfg_.embedding_dim;
    const std::size_t n_cat = fields_.cat_vocab_sizes.size();
    const std::size_t n_num = fields_.num_fields;
    const std::size_t total_f = fields_.total_fields();
    if (d == 0) throw std::invalid_argument("model: embedding_dim must be positive");
    if (total_f == 0) throw std::invalid_argument("model: schema has no fields");
    if (cfg_.tower.empty()) throw std::invalid_argument("model: tower must have at least one layer");

    auto push = [&](std::string id, std::vector<std::size_t> shape, ad::L2Group group) {
        params_.push_back(Parameter{std::move(id), Tensor::zeros(std::move(shape)), group});
    };

    push("bias", {1}, ad::L2Group::none);
    for (std::size_t i = 0; i < n_cat; ++i)
        push("emb." + std::to_string(i), {fields_.cat_vocab_sizes[i], d}, ad::L2Group::embedding);
    for (std::size_t k = 0; k < n_num; ++k) push("emb_num." + std::to_string(k), {1, d}, ad::L2Group::embedding);

    std::size_t flat_dim = total_f * d;
    std::size_t pair_count = total_f * (total_f - 1) / 2;
    std::size_t tower_in = 0;
    switch (arch_) {
        case Architecture::deepfm: {
            for (std::size_t i = 0; i < n_cat; ++i)
                push("fm1." + std::to_string(i), {fields_.cat_vocab_sizes[i], 1}, ad::L2Group::embedding);
            for (std::size_t k = 0; k < n_num; ++k)
                push("fm1_num." + std::to_string(k), {1, 1}, ad::L2Group::none);
            tower_in = flat_dim;
            break;
        }
        case Architecture::dcn: {
            for (std::size_t l = 0; l < cfg_.cross_depth; ++l) {
                push("cross." + std::to_string(l) + ".w", {flat_dim, 1}, ad::L2Group::dense);
                push("cross." + std::to_string(l) + ".b", {flat_dim}, ad::L2Group::none);
            }
            tower_in = flat_dim;
            break;
        }
        case Architecture::pnn: {
            tower_in = pair_count + flat_dim;
            break;
        }
        case Architecture::fibinet: {
            std::size_t hidden = senet_hidden(total_f, cfg_.senet_ratio);
            push("senet.w1", {total_f, hidden}, ad::L2Group::dense);
            push("senet.w2", {hidden, total_f}, ad::L2Group::dense);
            push("bilinear.w", {d, d}, ad::L2Group::dense);
            tower_in = 2 * pair_count * d;
            break;
        }
    }

    std::size_t in_dim = tower_in;
    for (std::size_t l = 0; l < cfg_.tower.size(); ++l) {
        push("tower." + std::to_string(l) + ".w", {in_dim, cfg_.tower[l]}, ad::L2Group::dense);
        push("tower." + std::to_string(l) + ".b", {cfg_.tower[l]}, ad::L2Group::none);
        in_dim = cfg_.tower[l];
    }
    if (arch_ == Architecture::dcn) {
        push("final.w", {flat_dim + cfg_.tower.back(), 1}, ad::L2Group::dense);
    } else {
        push("head.w", {cfg_.tower.back(), 1}, ad::L2Group::dense);
    }

    if (!initialize) return;

    Rng rng(init_seed);
    for (Parameter& p : params_) {
        const bool token_table = p.id.rfind("emb.", 0) == 0 || p.id.rfind("fm1.", 0) == 0;
        if (p.group == ad::L2Group::embedding) {
            for (double& v : p.value.vec()) v = rng.uniform(-0.01, 0.01);
            if (token_table) {
                // OOV row stays zero so unseen tokens start neutral
                for (std::size_t c = 0; c < p.value.cols(); ++c) p.value[c] = 0.0;
            }
        } else if (p.group == ad::L2Group::dense) {
            double fan_in = static_cast<double>(p.value.rows());
            double fan_out = static_cast<double>(p.value.rank() == 2 ? p.value.cols() : 1);
            double a = std::sqrt(6.0 / (fan_in + fan_out));
            for (double& v : p.value.vec()) v = rng.uniform(-a, a);
        }
        // L2Group::none (biases, numeric first-order scalars) stays zero
    }
}

ad::Parameter& ModelInstance::param(const std::string& id) {
    for (Parameter& p : params_) {
        if (p.id == id) return p;
    }
    throw std::invalid_argument("model has no parameter '" + id + "'");
}

const ad::Parameter& ModelInstance::param(const std::string& id) const {
    for (const Parameter& p : params_) {
        if (p.id == id) return p;
    }
    throw std::invalid_argument("model has no parameter '" + id + "'");
}

std::size_t ModelInstance::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter& p : params_) n += p.value.numel();
    return n;
}

std::vector<Var> ModelInstance::embed(Tape& tape, const data::Batch& batch) const {
    const std::size_t n_cat = fields_.cat_vocab_sizes.size();
    const std::size_t n_num = fields_.num_fields;
    if (batch.cat.size() != n_cat || batch.num.size() != n_num) {
        throw std::invalid_argument("embed: batch has " + std::to_string(batch.cat.size()) + " categorical / " +
                                    std::to_string(batch.num.size()) + " numeric fields, model expects " +
                                    std::to_string(n_cat) + " / " + std::to_string(n_num));
    }
    std::vector<Var> embs;
    embs.reserve(fields_.total_fields());
    for (std::size_t i = 0; i < n_cat; ++i) {
        for (std::size_t r = 0; r < batch.cat[i].size(); ++r) {
            if (batch.cat[i][r] >= fields_.cat_vocab_sizes[i]) {
                throw std::invalid_argument("embed: categorical field #" + std::to_string(i) + ": index " +
                                            std::to_string(batch.cat[i][r]) + " out of vocab range " +
                                            std::to_string(fields_.cat_vocab_sizes[i]));
            }
        }
        Var table = tape.parameter(param("emb." + std::to_string(i)));
        embs.push_back(tape.gather_rows(table, batch.cat[i]));
    }
    for (std::size_t k = 0; k < n_num; ++k) {
        Var x = tape.constant(Tensor({batch.num[k].size(), 1}, batch.num[k]));
        embs.push_back(tape.matmul(x, tape.parameter(param("emb_num." + std::to_string(k)))));
    }
    return embs;
}

ad::Var ModelInstance::tower_head(Tape& tape, Var input) const {
    Var h = input;
    for (std::size_t l = 0; l < cfg_.tower.size(); ++l) {
        Var w = tape.parameter(param("tower." + std::to_string(l) + ".w"));
        Var b = tape.parameter(param("tower." + std::to_string(l) + ".b"));
        h = tape.relu(tape.add(tape.matmul(h, w), b));
    }
    return h;
}

ad::Var ModelInstance::forward(Tape& tape, const data::Batch& batch) const {
    if (batch.size() == 0) throw std::invalid_argument("forward: empty batch");
    switch (arch_) {
        case Architecture::deepfm: return forward_deepfm(tape, batch);
        case Architecture::dcn: return forward_dcn(tape, batch);
        case Architecture::pnn: return forward_pnn(tape, batch);
        case Architecture::fibinet: return forward_fibinet(tape, batch);
    }
    throw std::logic_error("unreachable");
}

ad::Var ModelInstance::forward_deepfm(Tape& tape, const data::Batch& batch) const {
    std::vector<Var> embs = embed(tape, batch);

    // first-order term: one weight per active token, scalar weight x value per numeric field
    Var first = [&] {
        std::vector<Var> parts;
        for (std::size_t i = 0; i < fields_.cat_vocab_sizes.size(); ++i) {
            Var w = tape.parameter(param("fm1." + std::to_string(i)));
            parts.push_back(tape.gather_rows(w, batch.cat[i]));
        }
        for (std::size_t k = 0; k < fields_.num_fields; ++k) {
            Var x = tape.constant(Tensor({batch.num[k].size(), 1}, batch.num[k]));
            parts.push_back(tape.matmul(x, tape.parameter(param("fm1_num." + std::to_string(k)))));
        }
        Var acc = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) acc = tape.add(acc, parts[i]);
        return acc;
    }();

    Var pair = fm_pairwise(tape, embs);
    Var flat = tape.concat(embs, 1);
    Var deep = tape.matmul(tower_head(tape, flat), tape.parameter(param("head.w")));

    Var logit = tape.add(tape.add(tape.add(first, pair), deep), tape.parameter(param("bias")));
    return tape.sigmoid(logit);
}

ad::Var ModelInstance::forward_dcn(Tape& tape, const data::Batch& batch) const {
    std::vector<Var> embs = embed(tape, batch);
    Var flat = tape.concat(embs, 1);

    Var x = flat;
    for (std::size_t l = 0; l < cfg_.cross_depth; ++l) {
        Var w = tape.parameter(param("cross." + std::to_string(l) + ".w"));
        Var b = tape.parameter(param("cross." + std::to_string(l) + ".b"));
        x = cross_layer(tape, flat, x, w, b);
    }

    Var deep = tower_head(tape, flat);
    std::vector<Var> both{x, deep};
    Var combined = tape.concat(both, 1);
    Var logit = tape.add(tape.matmul(combined, tape.parameter(param("final.w"))),
                         tape.parameter(param("bias")));
    return tape.sigmoid(logit);
}

ad::Var ModelInstance::forward_pnn(Tape& tape, const data::Batch& batch) const {
    std::vector<Var> embs = embed(tape, batch);

    // inner-product signals for every field pair, then the raw embeddings
    std::vector<Var> parts;
    parts.reserve(embs.size() * (embs.size() - 1) / 2 + embs.size());
    for (std::size_t i = 0; i < embs.size(); ++i) {
        for (std::size_t j = i + 1; j < embs.size(); ++j) {
            parts.push_back(tape.sum(tape.mul(embs[i], embs[j]), 1));
        }
    }
    for (const Var& e : embs) parts.push_back(e);
    Var input = tape.concat(parts, 1);

    Var deep = tape.matmul(tower_head(tape, input), tape.parameter(param("head.w")));
    Var logit = tape.add(deep, tape.parameter(param("bias")));
    return tape.sigmoid(logit);
}

ad::Var ModelInstance::forward_fibinet(Tape& tape, const data::Batch& batch) const {
    std::vector<Var> embs = embed(tape, batch);

    Var w1 = tape.parameter(param("senet.w1"));
    Var w2 = tape.parameter(param("senet.w2"));
    Var bw = tape.parameter(param("bilinear.w"));

    std::vector<Var> raw_products = bilinear_interaction(tape, embs, bw);
    std::vector<Var> reweighted = senet_reweight(tape, embs, w1, w2);
    std::vector<Var> senet_products = bilinear_interaction(tape, reweighted, bw);

    std::vector<Var> parts;
    parts.reserve(raw_products.size() + senet_products.size());
    for (const Var& v : raw_products) parts.push_back(v);
    for (const Var& v : senet_products) parts.push_back(v);
    Var input = tape.concat(parts, 1);

    Var deep = tape.matmul(tower_head(tape, input), tape.parameter(param("head.w")));
    Var logit = tape.add(deep, tape.parameter(param("bias")));
    return tape.sigmoid(logit);
}

ad::Var ModelInstance::l2_penalty(Tape& tape, double coef_embedding, double coef_dense) const {
    Var acc{};
    bool have = false;
    for (const Parameter& p : params_) {
        double coef;
        if (p.group == ad::L2Group::embedding) coef = coef_embedding;
        else if (p.group == ad::L2Group::dense) coef = coef_dense;
        else continue;
        if (coef == 0.0) continue;
        Var term = tape.scale(tape.sum(tape.square(tape.parameter(param(p.id)))), coef);
        acc = have ? tape.add(acc, term) : term;
        have = true;
    }
    if (!have) return tape.constant(Tensor::scalar(0.0));
    return acc;
}

Var fm_pairwise(Tape& tape, std::span<const Var> field_embeddings) {
    if (field_embeddings.empty()) throw std::invalid_argument("fm_pairwise: no field embeddings");
    Var sum = field_embeddings[0];
    Var sq_sum = tape.square(field_embeddings[0]);
    for (std::size_t f = 1; f < field_embeddings.size(); ++f) {
        sum = tape.add(sum, field_embeddings[f]);
        sq_sum = tape.add(sq_sum, tape.square(field_embeddings[f]));
    }
    Var diff = tape.sub(tape.square(sum), sq_sum);
    return tape.scale(tape.sum(diff, 1), 0.5);
}

Var cross_layer(Tape& tape, Var x0, Var xl, Var w, Var b) {
    Var s = tape.matmul(xl, w);      // [B x 1] per-example scalar
    Var scaled = tape.mul(x0, s);    // row-broadcast
    return tape.add(tape.add(scaled, b), xl);
}

std::vector<Var> senet_reweight(Tape& tape, std::span<const Var> field_embeddings, Var w1, Var w2) {
    std::vector<Var> means;
    means.reserve(field_embeddings.size());
    for (const Var& e : field_embeddings) means.push_back(tape.mean(e, 1));
    Var z = tape.concat(means, 1); // [B x F]
    Var excitation = tape.relu(tape.matmul(tape.relu(tape.matmul(z, w1)), w2));
    std::vector<Var> out;
    out.reserve(field_embeddings.size());
    for (std::size_t f = 0; f < field_embeddings.size(); ++f) {
        out.push_back(tape.mul(field_embeddings[f], tape.slice_cols(excitation, f, 1)));
    }
    return out;
}

std::vector<Var> bilinear_interaction(Tape& tape, std::span<const Var> field_embeddings, Var w) {
    std::vector<Var> projected;
    projected.reserve(field_embeddings.size());
    for (const Var& e : field_embeddings) projected.push_back(tape.matmul(e, w));
    std::vector<Var> out;
    out.reserve(field_embeddings.size() * (field_embeddings.size() - 1) / 2);
    for (std::size_t i = 0; i < field_embeddings.size(); ++i) {
        for (std::size_t j = i + 1; j < field_embeddings.size(); ++j) {
            out.push_back(tape.mul(projected[i], field_embeddings[j]));
        }
    }
    return out;
}

} // namespace mutualctr::models
