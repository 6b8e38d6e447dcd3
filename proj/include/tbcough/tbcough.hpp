#pragma once

// Convenience header pulling in the whole library.

#include "tbcough/audio_io.hpp"
#include "tbcough/augmentation.hpp"
#include "tbcough/cnn.hpp"
#include "tbcough/dsp.hpp"
#include "tbcough/error.hpp"
#include "tbcough/evaluation.hpp"
#include "tbcough/features.hpp"
#include "tbcough/matrix.hpp"
#include "tbcough/model_io.hpp"
#include "tbcough/pipeline.hpp"
#include "tbcough/synth.hpp"
#include "tbcough/tabular.hpp"
#include "tbcough/trees.hpp"
