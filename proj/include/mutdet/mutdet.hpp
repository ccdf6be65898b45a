#pragma once

#include "mutdet/corpus.hpp"
#include "mutdet/detector.hpp"
#include "mutdet/error.hpp"
#include "mutdet/eval.hpp"
#include "mutdet/hash.hpp"
#include "mutdet/mutation.hpp"
#include "mutdet/pcv.hpp"
#include "mutdet/pipeline.hpp"
#include "mutdet/poison.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/textmodel.hpp"
#include "mutdet/weights_io.hpp"
