#pragma once

// Umbrella header.
#include "hatstory/checkpoint.hpp"
#include "hatstory/data.hpp"
#include "hatstory/errors.hpp"
#include "hatstory/evaluation.hpp"
#include "hatstory/gradcheck.hpp"
#include "hatstory/model.hpp"
#include "hatstory/pipeline.hpp"
#include "hatstory/random.hpp"
#include "hatstory/recurrent.hpp"
#include "hatstory/tensor.hpp"
#include "hatstory/training.hpp"
