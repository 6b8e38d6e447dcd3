// Synthesizes one cough, extracts its features and prints their shapes,
// then trains a small extra-trees model on pooled features of a toy set.

#include <iostream>

#include "tbcough/tbcough.hpp"

int main() {
    using namespace tbcough;
    SyntheticSpec spec;
    const AudioClip clip = synth_cough(true, spec, 42);
    const ClipFeatures f = extract_features(clip);
    std::cout << "samples " << clip.samples.size() << " @ " << clip.sample_rate_hz << " Hz\n"
              << "mel " << f.mel.values.rows() << "x" << f.mel.values.cols() << ", mfcc " << f.mfcc.values.rows()
              << "x" << f.mfcc.values.cols() << ", contrast " << f.contrast.values.rows() << "x"
              << f.contrast.values.cols() << '\n';

    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        const bool pos = i % 2 == 0;
        rows.push_back(pooled_acoustic_vector(extract_features(synth_cough(pos, spec, 1000 + i))));
        labels.push_back(pos ? 1 : 0);
    }
    Matrix<double> X(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), X.row(i).begin());
    ExtraTreesParams p;
    p.n_trees = 50;
    const auto model = extra_trees_fit(X, labels, p);
    const auto probe = pooled_acoustic_vector(extract_features(synth_cough(true, spec, 7)));
    std::cout << "P(positive) for a fresh positive clip: " << extra_trees_predict_proba(model, probe) << '\n';
}
