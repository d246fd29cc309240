// Finite-difference gradient check in double precision on a miniature model.
// Prints a JSON report; exit 0 when every check is within tolerance.
#include <CLI11.hpp>

#include <iostream>

#include "phd/core/ops.hpp"
#include "phd/training.hpp"

using namespace phd;

namespace {

backbone::UNetSpec miniature() {
    backbone::UNetSpec s;
    s.base_width = 8;
    s.channel_mult = {1, 2};
    s.res_blocks = 1;
    s.attention_levels = {1};
    s.time_embed_dim = 16;
    s.text_dim = 8;
    s.image_size = 8;
    s.groups = 4;
    return s;
}

training::Batch make_batch(const backbone::UNetSpec& spec, const diffusion::NoiseSchedule& schedule, Rng& rng) {
    const int n = 2, s = spec.image_size;
    training::Batch b;
    b.target = randn({n, 3, s, s}, rng);
    b.condition = randn({n, 4, s, s}, rng);
    b.eps = randn({n, 3, s, s}, rng);
    b.t = {uniform_int(rng, 1, schedule.T), uniform_int(rng, 1, schedule.T)};
    b.text = {encode_text("a red disk"), TextCondition::null()};
    return b;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient check for the harmonizer and backbone"};
    int count = 24;
    double tolerance = 1e-2, step = 1e-3;
    std::uint64_t seed = 0;
    app.add_option("--count", count, "Parameter entries per model");
    app.add_option("--tolerance", tolerance);
    app.add_option("--step", step, "Central-difference step");
    app.add_option("--seed", seed);
    CLI11_PARSE(app, argc, argv);

    try {
        const backbone::UNetSpec spec = miniature();
        const auto schedule = diffusion::linear_schedule(20);
        Rng rng(derive_seed(seed, 1));

        backbone::Backbone bb(spec, derive_seed(seed, 2));
        bb.freeze();
        harmonizer::Harmonizer phi = harmonizer::Harmonizer::init_from_backbone(bb, derive_seed(seed, 3));
        // Zero projections would hide every upstream gradient; start from small random values instead.
        for (auto& [name, v] : phi.params().entries()) {
            if (harmonizer::Harmonizer::is_projection(name)) fill_normal(v->value, rng, 0.1);
        }
        const training::Batch batch = make_batch(spec, schedule, rng);
        const auto h = training::gradient_check(phi, bb, batch, schedule, tolerance, count, step, derive_seed(seed, 4));

        // Backbone gradients through the same forward pass, with its parameters trainable.
        backbone::Backbone open = bb.unfrozen_copy();
        open.params().set_requires_grad(true);
        const Tensor x_t = training::noised_batch(batch, schedule);
        auto loss = [&] {
            return ops::mse(open.forward(constant(x_t), batch.t, open.embed_text(batch.text)), batch.eps);
        };
        Rng pick(derive_seed(seed, 5));
        const auto b = training::check_gradients(open.params(), loss, count, step, tolerance, pick);

        const bool passed = h.passed && b.passed;
        std::cout << nlohmann::json{{"harmonizer", h.to_json()}, {"backbone", b.to_json()}, {"passed", passed}}.dump(2)
                  << "\n";
        return passed ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
