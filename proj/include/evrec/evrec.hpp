#pragma once

#include "evrec/autograd.hpp"
#include "evrec/encoders.hpp"
#include "evrec/evaluation.hpp"
#include "evrec/events.hpp"
#include "evrec/network.hpp"
#include "evrec/objectives.hpp"
#include "evrec/pipeline.hpp"
#include "evrec/png_io.hpp"
#include "evrec/prototypes.hpp"
#include "evrec/representation.hpp"
#include "evrec/rng.hpp"
#include "evrec/sampling.hpp"
#include "evrec/synthetic.hpp"
#include "evrec/tensor.hpp"
